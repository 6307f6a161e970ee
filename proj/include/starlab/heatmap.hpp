// Copyright 2026 The starlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// SVG heatmap of a layer-by-time grid on a log10 color scale.

#pragma once

#include "starlab/lattice.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace starlab {

struct HeatmapOptions {
  std::string title;
  int cell_width = 0;  // 0: fit the grid into roughly 900 px
  int cell_height = 24;
};

namespace detail {

// Viridis sampled at nine stops.
inline std::string viridis(double u) {
  static constexpr std::array<std::array<double, 3>, 9> stops{{{68, 1, 84},
                                                               {71, 44, 122},
                                                               {59, 81, 139},
                                                               {44, 113, 142},
                                                               {33, 144, 141},
                                                               {39, 173, 129},
                                                               {92, 200, 99},
                                                               {170, 220, 50},
                                                               {253, 231, 37}}};
  u = std::clamp(u, 0.0, 1.0) * (stops.size() - 1);
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(u), stops.size() - 2);
  const double f = u - static_cast<double>(i);
  char buf[8];
  int rgb[3];
  for (int k = 0; k < 3; ++k)
    rgb[k] = static_cast<int>(std::lround(stops[i][k] + f * (stops[i + 1][k] - stops[i][k])));
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
  return buf;
}

}  // namespace detail

/// values[l][t]; layer 1 is drawn at the bottom. Non-positive or non-finite
/// cells are drawn grey.
inline std::string heatmap_svg(const std::vector<std::vector<double>>& values,
                               const HeatmapOptions& opt = {}) {
  if (values.empty() || values.front().empty()) throw std::invalid_argument("heatmap: empty grid");
  const std::size_t L = values.size();
  const std::size_t T = values.front().size();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& row : values) {
    if (row.size() != T) throw std::invalid_argument("heatmap: ragged grid");
    for (double v : row)
      if (v > 0 && std::isfinite(v)) {
        lo = std::min(lo, std::log10(v));
        hi = std::max(hi, std::log10(v));
      }
  }
  if (!std::isfinite(lo)) lo = hi = 0;
  if (hi - lo < 1e-12) hi = lo + 1;

  const int cw = opt.cell_width > 0 ? opt.cell_width : std::max(1, static_cast<int>(900 / T));
  const int ch = opt.cell_height;
  const int left = 60, top = 40, bar_w = 18, bar_gap = 30;
  const int grid_w = cw * static_cast<int>(T);
  const int grid_h = ch * static_cast<int>(L);
  const int width = left + grid_w + bar_gap + bar_w + 70;
  const int height = top + grid_h + 50;

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  if (!opt.title.empty())
    s << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << opt.title << "</text>\n";
  for (std::size_t l = 0; l < L; ++l) {
    const int y = top + static_cast<int>(L - 1 - l) * ch;
    for (std::size_t t = 0; t < T; ++t) {
      const double v = values[l][t];
      const std::string fill =
          v > 0 && std::isfinite(v) ? detail::viridis((std::log10(v) - lo) / (hi - lo)) : "#bbbbbb";
      s << "<rect x=\"" << left + static_cast<int>(t) * cw << "\" y=\"" << y << "\" width=\"" << cw
        << "\" height=\"" << ch << "\" fill=\"" << fill << "\"/>\n";
    }
    s << "<text x=\"" << left - 6 << "\" y=\"" << y + ch / 2 + 4 << "\" text-anchor=\"end\">" << l + 1
      << "</text>\n";
  }
  s << "<text x=\"14\" y=\"" << top + grid_h / 2 << "\" transform=\"rotate(-90 14 " << top + grid_h / 2
    << ")\" text-anchor=\"middle\">layer</text>\n";
  const std::size_t tick = std::max<std::size_t>(1, T / 8);
  for (std::size_t t = 0; t < T; t += tick)
    s << "<text x=\"" << left + static_cast<int>(t) * cw + cw / 2 << "\" y=\"" << top + grid_h + 14
      << "\" text-anchor=\"middle\">" << t + 1 << "</text>\n";
  s << "<text x=\"" << left + grid_w / 2 << "\" y=\"" << top + grid_h + 34
    << "\" text-anchor=\"middle\">time step</text>\n";

  const int bx = left + grid_w + bar_gap;
  const int steps = 64;
  for (int k = 0; k < steps; ++k) {
    const double u = 1.0 - (k + 0.5) / steps;
    s << "<rect x=\"" << bx << "\" y=\"" << top + k * grid_h / steps << "\" width=\"" << bar_w
      << "\" height=\"" << grid_h / steps + 1 << "\" fill=\"" << detail::viridis(u) << "\"/>\n";
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", hi);
  s << "<text x=\"" << bx + bar_w + 4 << "\" y=\"" << top + 10 << "\">" << buf << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.2f", lo);
  s << "<text x=\"" << bx + bar_w + 4 << "\" y=\"" << top + grid_h << "\">" << buf << "</text>\n";
  s << "<text x=\"" << bx + bar_w + 4 << "\" y=\"" << top + grid_h / 2 << "\">log10</text>\n";
  s << "</svg>\n";
  return s.str();
}

/// Mean gradient-norm heatmap of a field.
inline void write_heatmap(const std::string& path, const GradientField& field, const HeatmapOptions& opt = {}) {
  std::vector<std::vector<double>> v(static_cast<std::size_t>(field.layers()),
                                     std::vector<double>(static_cast<std::size_t>(field.steps())));
  for (Index l = 0; l < field.layers(); ++l)
    for (Index t = 0; t < field.steps(); ++t) v[l][t] = field.gparam(l, t).mean;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("heatmap: cannot write " + path);
  f << heatmap_svg(v, opt);
}

}  // namespace starlab
