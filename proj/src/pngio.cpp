#include "pngio.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace idfuse {

namespace {

uint32_t crc_table_entry(uint32_t n) {
    uint32_t c = n;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    return c;
}

uint32_t crc32_png(const uint8_t* data, size_t n, uint32_t crc = 0xffffffffu) {
    static uint32_t table[256];
    static bool init = [] {
        for (uint32_t i = 0; i < 256; ++i) table[i] = crc_table_entry(i);
        return true;
    }();
    (void)init;
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
    return crc;
}

void put_u32(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back((uint8_t)(x >> 24));
    v.push_back((uint8_t)(x >> 16));
    v.push_back((uint8_t)(x >> 8));
    v.push_back((uint8_t)x);
}

uint32_t get_u32(const uint8_t* p) {
    return (uint32_t)p[0] << 24 | (uint32_t)p[1] << 16 | (uint32_t)p[2] << 8 | p[3];
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    put_u32(out, (uint32_t)data.size());
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uint32_t crc = crc32_png(out.data() + start, out.size() - start) ^ 0xffffffffu;
    put_u32(out, crc);
}

std::vector<uint8_t> zlib_deflate(const std::vector<uint8_t>& in) {
    uLongf bound = compressBound((uLong)in.size());
    std::vector<uint8_t> out(bound);
    if (compress2(out.data(), &bound, in.data(), (uLong)in.size(), 6) != Z_OK)
        throw std::runtime_error("png: deflate failed");
    out.resize(bound);
    return out;
}

std::vector<uint8_t> zlib_inflate(const uint8_t* data, size_t n, size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf len = (uLongf)expected;
    int rc = uncompress(out.data(), &len, data, (uLong)n);
    if (rc != Z_OK || len != expected) throw std::runtime_error("png: inflate failed");
    return out;
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

std::vector<uint8_t> encode_png(const PngImage& img, bool one_bit) {
    if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("png: channels must be 1 or 3");
    if (one_bit && img.channels != 1) throw std::invalid_argument("png: 1-bit must be grayscale");
    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

    std::vector<uint8_t> ihdr;
    put_u32(ihdr, (uint32_t)img.width);
    put_u32(ihdr, (uint32_t)img.height);
    ihdr.push_back(one_bit ? 1 : 8);                 // bit depth
    ihdr.push_back(img.channels == 3 ? 2 : 0);       // color type
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    put_chunk(out, "IHDR", ihdr);

    std::vector<uint8_t> raw;
    if (one_bit) {
        int row_bytes = (img.width + 7) / 8;
        raw.reserve((size_t)img.height * (row_bytes + 1));
        for (int y = 0; y < img.height; ++y) {
            raw.push_back(0);  // filter none
            for (int b = 0; b < row_bytes; ++b) {
                uint8_t byte = 0;
                for (int bit = 0; bit < 8; ++bit) {
                    int x = b * 8 + bit;
                    if (x < img.width && img.pixels[(size_t)y * img.width + x] >= 128) byte |= (uint8_t)(0x80 >> bit);
                }
                raw.push_back(byte);
            }
        }
    } else {
        int row_bytes = img.width * img.channels;
        raw.reserve((size_t)img.height * (row_bytes + 1));
        for (int y = 0; y < img.height; ++y) {
            raw.push_back(0);
            const uint8_t* row = img.pixels.data() + (size_t)y * row_bytes;
            raw.insert(raw.end(), row, row + row_bytes);
        }
    }
    put_chunk(out, "IDAT", zlib_deflate(raw));
    put_chunk(out, "IEND", {});
    return out;
}

PngImage decode_png(const std::vector<uint8_t>& bytes) {
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0) throw std::runtime_error("png: bad signature");
    size_t pos = 8;
    PngImage img;
    int bit_depth = 0, color_type = 0;
    std::vector<uint8_t> idat;
    while (pos + 8 <= bytes.size()) {
        uint32_t len = get_u32(bytes.data() + pos);
        std::string type((const char*)bytes.data() + pos + 4, 4);
        const uint8_t* data = bytes.data() + pos + 8;
        if (pos + 12 + len > bytes.size()) throw std::runtime_error("png: truncated chunk");
        if (type == "IHDR") {
            img.width = (int)get_u32(data);
            img.height = (int)get_u32(data + 4);
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw std::runtime_error("png: interlace unsupported");
            if (!((bit_depth == 8 && (color_type == 0 || color_type == 2)) || (bit_depth == 1 && color_type == 0)))
                throw std::runtime_error("png: unsupported format");
            img.channels = color_type == 2 ? 3 : 1;
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (img.width <= 0 || img.height <= 0) throw std::runtime_error("png: missing IHDR");

    int row_bytes = bit_depth == 1 ? (img.width + 7) / 8 : img.width * img.channels;
    size_t expected = (size_t)img.height * (row_bytes + 1);
    std::vector<uint8_t> raw = zlib_inflate(idat.data(), idat.size(), expected);

    int bpp = bit_depth == 1 ? 1 : img.channels;
    std::vector<uint8_t> rows((size_t)img.height * row_bytes);
    for (int y = 0; y < img.height; ++y) {
        uint8_t filter = raw[(size_t)y * (row_bytes + 1)];
        const uint8_t* src = raw.data() + (size_t)y * (row_bytes + 1) + 1;
        uint8_t* cur = rows.data() + (size_t)y * row_bytes;
        const uint8_t* up = y > 0 ? rows.data() + (size_t)(y - 1) * row_bytes : nullptr;
        for (int x = 0; x < row_bytes; ++x) {
            int a = x >= bpp ? cur[x - bpp] : 0;
            int b = up ? up[x] : 0;
            int c = (up && x >= bpp) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw std::runtime_error("png: bad filter");
            }
            cur[x] = (uint8_t)v;
        }
    }

    if (bit_depth == 1) {
        img.pixels.resize((size_t)img.width * img.height);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                uint8_t byte = rows[(size_t)y * row_bytes + x / 8];
                img.pixels[(size_t)y * img.width + x] = (byte >> (7 - x % 8)) & 1 ? 255 : 0;
            }
    } else {
        img.pixels = std::move(rows);
    }
    return img;
}

void write_png(const std::string& path, const PngImage& img, bool one_bit) {
    auto bytes = encode_png(img, one_bit);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write((const char*)bytes.data(), (std::streamsize)bytes.size());
}

PngImage read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

PngImage to_png_rgb(const Tensor<float>& image, int size) {
    PngImage img;
    img.width = img.height = size;
    img.channels = 3;
    img.pixels.resize((size_t)size * size * 3);
    int S = size * size;
    for (int p = 0; p < S; ++p)
        for (int c = 0; c < 3; ++c) {
            float v = std::clamp(image[(int64_t)c * S + p], 0.0f, 1.0f);
            img.pixels[(size_t)p * 3 + c] = (uint8_t)std::lround(v * 255.0f);
        }
    return img;
}

Tensor<float> from_png_rgb(const PngImage& img) {
    if (img.channels != 3) throw std::runtime_error("expected RGB png");
    int S = img.width * img.height;
    Tensor<float> out({3, S});
    for (int p = 0; p < S; ++p)
        for (int c = 0; c < 3; ++c) out[(int64_t)c * S + p] = (float)img.pixels[(size_t)p * 3 + c] / 255.0f;
    return out;
}

PngImage to_png_mask(const Tensor<float>& mask, int size) {
    PngImage img;
    img.width = img.height = size;
    img.channels = 1;
    img.pixels.resize((size_t)size * size);
    for (int p = 0; p < size * size; ++p) img.pixels[(size_t)p] = mask[p] >= 0.5f ? 255 : 0;
    return img;
}

Tensor<float> from_png_mask(const PngImage& img) {
    if (img.channels != 1) throw std::runtime_error("expected grayscale png");
    int S = img.width * img.height;
    Tensor<float> out({S});
    for (int p = 0; p < S; ++p) out[p] = img.pixels[(size_t)p] >= 128 ? 1.0f : 0.0f;
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write(data.data(), (std::streamsize)data.size());
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

}  // namespace idfuse
