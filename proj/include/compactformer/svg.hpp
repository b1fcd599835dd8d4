#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "compactformer/tensor.hpp"

namespace cf::svg {

/// Five-stop approximation of a perceptually ordered colormap.
inline std::string color_for(double v, double vmin, double vmax) {
    static const double stops[5][3] = {{68, 1, 84},     {59, 82, 139},  {33, 145, 140},
                                       {94, 201, 98},   {253, 231, 37}};
    double t = (vmax > vmin) ? (v - vmin) / (vmax - vmin) : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double pos = t * 4.0;
    const auto lo = static_cast<std::size_t>(std::min(3.0, std::floor(pos)));
    const double f = pos - static_cast<double>(lo);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "rgb(%d,%d,%d)",
                  static_cast<int>(std::lround(stops[lo][0] + f * (stops[lo + 1][0] - stops[lo][0]))),
                  static_cast<int>(std::lround(stops[lo][1] + f * (stops[lo + 1][1] - stops[lo][1]))),
                  static_cast<int>(std::lround(stops[lo][2] + f * (stops[lo + 1][2] - stops[lo][2]))));
    return buf;
}

/// Heatmap over (patch length rows) x (horizon columns) with value labels
/// and the color-scale bounds printed under the title.
inline std::string heatmap(const std::vector<std::vector<double>>& values,
                           const std::vector<std::size_t>& patch_labels,
                           const std::vector<std::size_t>& horizon_labels,
                           const std::string& title, double vmin, double vmax) {
    const std::size_t rows = values.size();
    const std::size_t cols = rows ? values[0].size() : 0;
    const int cell = 64, left = 70, top = 60, bottom = 40;
    const int width = left + cell * static_cast<int>(cols) + 20;
    const int height = top + cell * static_cast<int>(rows) + bottom;
    char buf[256];
    std::string s;
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\">\n",
                  width, height);
    s += buf;
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"20\" font-family=\"monospace\" font-size=\"14\">%s</text>\n",
                  left, title.c_str());
    s += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"38\" font-family=\"monospace\" font-size=\"11\">scale [%.6f, %.6f]</text>\n",
                  left, vmin, vmax);
    s += buf;
    for (std::size_t r = 0; r < rows; ++r) {
        std::snprintf(buf, sizeof(buf),
                      "<text x=\"%d\" y=\"%d\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">P=%zu</text>\n",
                      left - 6, top + static_cast<int>(r) * cell + cell / 2 + 4,
                      patch_labels[r]);
        s += buf;
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = values[r][c];
            std::snprintf(buf, sizeof(buf),
                          "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"%s\" stroke=\"white\"/>\n",
                          left + static_cast<int>(c) * cell, top + static_cast<int>(r) * cell,
                          cell, cell, color_for(v, vmin, vmax).c_str());
            s += buf;
            std::snprintf(buf, sizeof(buf),
                          "<text x=\"%d\" y=\"%d\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\" fill=\"white\">%.4f</text>\n",
                          left + static_cast<int>(c) * cell + cell / 2,
                          top + static_cast<int>(r) * cell + cell / 2 + 4, v);
            s += buf;
        }
    }
    for (std::size_t c = 0; c < cols; ++c) {
        std::snprintf(buf, sizeof(buf),
                      "<text x=\"%d\" y=\"%d\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">H=%zu</text>\n",
                      left + static_cast<int>(c) * cell + cell / 2,
                      top + static_cast<int>(rows) * cell + 18, horizon_labels[c]);
        s += buf;
    }
    s += "</svg>\n";
    return s;
}

}  // namespace cf::svg
