#pragma once

#include "pngio.hpp"

namespace idfuse {

// Minimal static charts (PNG): line series for sweeps, bars for ablations.

struct Series {
    std::string label;
    std::vector<double> x, y;
};

void plot_lines(const std::string& path, const std::vector<Series>& series, const std::string& title,
                int width = 480, int height = 320);

void plot_bars(const std::string& path, const std::vector<std::string>& labels, const std::vector<double>& values,
               const std::string& title, int width = 480, int height = 320);

// contact sheet of 32x32 tiles
void save_grid(const std::string& path, const std::vector<Tensor<float>>& images, int cols);

}  // namespace idfuse
