#include "plot.hpp"

#include <cmath>

#include "avatars.hpp"

namespace idfuse {

namespace {

// 5x7 glyphs for the characters chart labels use; each glyph is 5 column
// bytes, low bit = top row
struct Glyph {
    char ch;
    uint8_t col[5];
};

const Glyph kFont[] = {
    {'0', {0x3e, 0x51, 0x49, 0x45, 0x3e}}, {'1', {0x00, 0x42, 0x7f, 0x40, 0x00}},
    {'2', {0x42, 0x61, 0x51, 0x49, 0x46}}, {'3', {0x21, 0x41, 0x45, 0x4b, 0x31}},
    {'4', {0x18, 0x14, 0x12, 0x7f, 0x10}}, {'5', {0x27, 0x45, 0x45, 0x45, 0x39}},
    {'6', {0x3c, 0x4a, 0x49, 0x49, 0x30}}, {'7', {0x01, 0x71, 0x09, 0x05, 0x03}},
    {'8', {0x36, 0x49, 0x49, 0x49, 0x36}}, {'9', {0x06, 0x49, 0x49, 0x29, 0x1e}},
    {'.', {0x00, 0x60, 0x60, 0x00, 0x00}}, {'-', {0x08, 0x08, 0x08, 0x08, 0x08}},
    {'_', {0x40, 0x40, 0x40, 0x40, 0x40}}, {':', {0x00, 0x36, 0x36, 0x00, 0x00}},
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00}}, {'/', {0x20, 0x10, 0x08, 0x04, 0x02}},
    {'a', {0x20, 0x54, 0x54, 0x54, 0x78}}, {'b', {0x7f, 0x48, 0x44, 0x44, 0x38}},
    {'c', {0x38, 0x44, 0x44, 0x44, 0x20}}, {'d', {0x38, 0x44, 0x44, 0x48, 0x7f}},
    {'e', {0x38, 0x54, 0x54, 0x54, 0x18}}, {'f', {0x08, 0x7e, 0x09, 0x01, 0x02}},
    {'g', {0x0c, 0x52, 0x52, 0x52, 0x3e}}, {'h', {0x7f, 0x08, 0x04, 0x04, 0x78}},
    {'i', {0x00, 0x44, 0x7d, 0x40, 0x00}}, {'j', {0x20, 0x40, 0x44, 0x3d, 0x00}},
    {'k', {0x7f, 0x10, 0x28, 0x44, 0x00}}, {'l', {0x00, 0x41, 0x7f, 0x40, 0x00}},
    {'m', {0x7c, 0x04, 0x18, 0x04, 0x78}}, {'n', {0x7c, 0x08, 0x04, 0x04, 0x78}},
    {'o', {0x38, 0x44, 0x44, 0x44, 0x38}}, {'p', {0x7c, 0x14, 0x14, 0x14, 0x08}},
    {'q', {0x08, 0x14, 0x14, 0x18, 0x7c}}, {'r', {0x7c, 0x08, 0x04, 0x04, 0x08}},
    {'s', {0x48, 0x54, 0x54, 0x54, 0x20}}, {'t', {0x04, 0x3f, 0x44, 0x40, 0x20}},
    {'u', {0x3c, 0x40, 0x40, 0x20, 0x7c}}, {'v', {0x1c, 0x20, 0x40, 0x20, 0x1c}},
    {'w', {0x3c, 0x40, 0x30, 0x40, 0x3c}}, {'x', {0x44, 0x28, 0x10, 0x28, 0x44}},
    {'y', {0x0c, 0x50, 0x50, 0x50, 0x3c}}, {'z', {0x44, 0x64, 0x54, 0x4c, 0x44}},
};

struct Canvas {
    int w, h;
    std::vector<uint8_t> px;  // RGB

    Canvas(int w_, int h_) : w(w_), h(h_), px((size_t)w_ * h_ * 3, 255) {}

    void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
        if (x < 0 || x >= w || y < 0 || y >= h) return;
        size_t i = ((size_t)y * w + x) * 3;
        px[i] = r; px[i + 1] = g; px[i + 2] = b;
    }
    void line(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
        int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1, err = dx + dy;
        while (true) {
            set(x0, y0, r, g, b);
            if (x0 == x1 && y0 == y1) break;
            int e2 = 2 * err;
            if (e2 >= dy) { err += dy; x0 += sx; }
            if (e2 <= dx) { err += dx; y0 += sy; }
        }
    }
    void rect_fill(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
        for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
            for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, r, g, b);
    }
    void text(int x, int y, const std::string& s) {
        for (char raw : s) {
            char c = (char)std::tolower((unsigned char)raw);
            const Glyph* g = nullptr;
            for (const auto& f : kFont)
                if (f.ch == c) { g = &f; break; }
            if (g) {
                for (int cx = 0; cx < 5; ++cx)
                    for (int cy = 0; cy < 7; ++cy)
                        if (g->col[cx] >> cy & 1) set(x + cx, y + cy, 30, 30, 30);
            }
            x += 6;
        }
    }
    PngImage to_png() const {
        PngImage img;
        img.width = w;
        img.height = h;
        img.channels = 3;
        img.pixels = px;
        return img;
    }
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

const uint8_t kColors[][3] = {{198, 60, 60}, {50, 110, 190}, {40, 150, 90}, {160, 90, 180}};

}  // namespace

void plot_lines(const std::string& path, const std::vector<Series>& series, const std::string& title, int width,
                int height) {
    Canvas c(width, height);
    int l = 52, r = width - 14, top = 26, bot = height - 34;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]); xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]); ymax = std::max(ymax, s.y[i]);
        }
    if (xmin >= xmax) { xmin -= 0.5; xmax += 0.5; }
    if (ymin >= ymax) { ymin -= 0.5; ymax += 0.5; }
    double ypad = 0.08 * (ymax - ymin);
    ymin -= ypad; ymax += ypad;
    auto px = [&](double x) { return l + (int)((x - xmin) / (xmax - xmin) * (r - l)); };
    auto py = [&](double y) { return bot - (int)((y - ymin) / (ymax - ymin) * (bot - top)); };

    c.text(l, 8, title);
    c.line(l, top, l, bot, 0, 0, 0);
    c.line(l, bot, r, bot, 0, 0, 0);
    for (int i = 0; i <= 4; ++i) {
        double xv = xmin + (xmax - xmin) * i / 4, yv = ymin + (ymax - ymin) * i / 4;
        c.line(px(xv), bot, px(xv), bot + 3, 0, 0, 0);
        c.text(px(xv) - 10, bot + 6, fmt(xv));
        c.line(l - 3, py(yv), l, py(yv), 0, 0, 0);
        c.text(4, py(yv) - 3, fmt(yv));
    }
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const uint8_t* col = kColors[si % 4];
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            c.line(px(s.x[i]), py(s.y[i]), px(s.x[i + 1]), py(s.y[i + 1]), col[0], col[1], col[2]);
        for (size_t i = 0; i < s.x.size(); ++i)
            c.rect_fill(px(s.x[i]) - 1, py(s.y[i]) - 1, px(s.x[i]) + 1, py(s.y[i]) + 1, col[0], col[1], col[2]);
        c.rect_fill(l + 8 + (int)si * 110, height - 18, l + 16 + (int)si * 110, height - 14, col[0], col[1], col[2]);
        c.text(l + 20 + (int)si * 110, height - 21, s.label);
    }
    write_png(path, c.to_png());
}

void plot_bars(const std::string& path, const std::vector<std::string>& labels, const std::vector<double>& values,
               const std::string& title, int width, int height) {
    Canvas c(width, height);
    int l = 52, r = width - 14, top = 26, bot = height - 34;
    double ymax = 1e-9;
    for (double v : values) ymax = std::max(ymax, v);
    ymax *= 1.1;
    c.text(l, 8, title);
    c.line(l, top, l, bot, 0, 0, 0);
    c.line(l, bot, r, bot, 0, 0, 0);
    for (int i = 0; i <= 4; ++i) {
        double yv = ymax * i / 4;
        int y = bot - (int)(yv / ymax * (bot - top));
        c.line(l - 3, y, l, y, 0, 0, 0);
        c.text(4, y - 3, fmt(yv));
    }
    int n = (int)values.size();
    int bw = (r - l) / std::max(1, n);
    for (int i = 0; i < n; ++i) {
        int x0 = l + i * bw + bw / 6, x1 = l + (i + 1) * bw - bw / 6;
        int y = bot - (int)(values[(size_t)i] / ymax * (bot - top));
        const uint8_t* col = kColors[i % 4];
        c.rect_fill(x0, y, x1, bot - 1, col[0], col[1], col[2]);
        c.text(x0, bot + 6, labels[(size_t)i]);
        c.text(x0, y - 10, fmt(values[(size_t)i]));
    }
    write_png(path, c.to_png());
}

void save_grid(const std::string& path, const std::vector<Tensor<float>>& images, int cols) {
    if (images.empty()) throw std::invalid_argument("save_grid: no images");
    int rows = ((int)images.size() + cols - 1) / cols;
    int pad = 2;
    int W = cols * (kImageSize + pad) + pad, H = rows * (kImageSize + pad) + pad;
    PngImage img;
    img.width = W;
    img.height = H;
    img.channels = 3;
    img.pixels.assign((size_t)W * H * 3, 235);
    for (size_t n = 0; n < images.size(); ++n) {
        int gy = (int)n / cols, gx = (int)n % cols;
        int ox = pad + gx * (kImageSize + pad), oy = pad + gy * (kImageSize + pad);
        for (int y = 0; y < kImageSize; ++y)
            for (int x = 0; x < kImageSize; ++x)
                for (int ch = 0; ch < 3; ++ch) {
                    float v = std::clamp(images[n][(int64_t)ch * kImagePixels + y * kImageSize + x], 0.0f, 1.0f);
                    img.pixels[(((size_t)(oy + y) * W) + (ox + x)) * 3 + ch] = (uint8_t)std::lround(v * 255);
                }
    }
    write_png(path, img);
}

}  // namespace idfuse
