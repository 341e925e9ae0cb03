#pragma once

#include <string>

#include "core.hpp"

namespace idfuse {

// Minimal PNG support: 8-bit RGB and 8-bit grayscale images, plus 1-bit
// grayscale for binary masks. Encoding is fixed (filter 0, fixed zlib level)
// so identical pixels always produce identical bytes.

struct PngImage {
    int width = 0, height = 0, channels = 0;  // channels: 1 or 3
    std::vector<uint8_t> pixels;              // row-major, interleaved
};

std::vector<uint8_t> encode_png(const PngImage& img, bool one_bit = false);
PngImage decode_png(const std::vector<uint8_t>& bytes);

void write_png(const std::string& path, const PngImage& img, bool one_bit = false);
PngImage read_png(const std::string& path);

// (3, H*W) float image in [0,1] <-> 8-bit PNG
PngImage to_png_rgb(const Tensor<float>& image, int size);
Tensor<float> from_png_rgb(const PngImage& img);

// (H*W) binary mask <-> 1-bit PNG
PngImage to_png_mask(const Tensor<float>& mask, int size);
Tensor<float> from_png_mask(const PngImage& img);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& data);
bool file_exists(const std::string& path);

}  // namespace idfuse
