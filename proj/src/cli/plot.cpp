// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/cli/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace permflow::cli {
namespace {

// Viridis anchors, interpolated linearly.
constexpr std::array<std::array<double, 3>, 5> kRamp{{{68, 1, 84},
                                                      {59, 82, 139},
                                                      {33, 145, 140},
                                                      {94, 201, 98},
                                                      {253, 231, 37}}};

class Canvas {
 public:
  explicit Canvas(const PlotStyle& s) : s_(s) {}

  double px(double x) const { return s_.margin + (x + s_.extent) / (2 * s_.extent) * s_.pixels; }
  // SVG y grows downwards; world y grows upwards.
  double py(double y) const { return s_.margin + (s_.extent - y) / (2 * s_.extent) * s_.pixels; }
  double scale() const { return s_.pixels / (2 * s_.extent); }

 private:
  PlotStyle s_;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

void box(std::ostringstream& o, const Canvas& c, const Box& b, const char* cls) {
  const double half = 0.5 * b.w;
  o << "  <rect class=\"" << cls << "\" x=\"" << num(c.px(b.cx - half)) << "\" y=\""
    << num(c.py(b.cy + half)) << "\" width=\"" << num(b.w * c.scale()) << "\" height=\""
    << num(b.w * c.scale()) << "\"/>\n";
}

}  // namespace

std::string time_color(double u) {
  u = std::clamp(std::isfinite(u) ? u : 0.0, 0.0, 1.0);
  const double pos = u * static_cast<double>(kRamp.size() - 1);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(pos), kRamp.size() - 2);
  const double f = pos - static_cast<double>(k);
  char buf[8];
  int rgb[3];
  for (int ch = 0; ch < 3; ++ch) {
    rgb[ch] = static_cast<int>(std::lround(kRamp[k][ch] + f * (kRamp[k + 1][ch] - kRamp[k][ch])));
  }
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
  return buf;
}

std::string render_scene_svg(const SceneRecord& scene, TaskKind task,
                             std::span<const PlotSample> samples, const PlotStyle& style) {
  const Canvas c(style);
  const double side = style.pixels + 2 * style.margin;
  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(side) << "\" height=\"" << num(side)
    << "\" viewBox=\"0 0 " << num(side) << ' ' << num(side) << "\">\n"
    << "  <style>\n"
    << "    .frame { fill: white; stroke: black; stroke-width: 1; }\n"
    << "    .axis { stroke: #bbbbbb; stroke-width: 0.75; }\n"
    << "    .tick { font: 10px sans-serif; fill: #333333; }\n"
    << "    .condition { fill: #9e9e9e; fill-opacity: 0.8; stroke: #616161; stroke-width: 1; }\n"
    << "    .truth { fill: none; stroke: #2e7d32; stroke-width: 1.5; stroke-dasharray: 4 3; }\n"
    << "    .sample { fill: #1e88e5; fill-opacity: 0.25; stroke: #0d47a1; stroke-width: 1; }\n"
    << "    .path { fill: none; stroke-width: 1.5; }\n"
    << "  </style>\n";

  // Frame, zero axes and unit ticks.
  o << "  <rect class=\"frame\" x=\"" << num(style.margin) << "\" y=\"" << num(style.margin)
    << "\" width=\"" << num(style.pixels) << "\" height=\"" << num(style.pixels) << "\"/>\n";
  o << "  <line class=\"axis\" x1=\"" << num(c.px(-style.extent)) << "\" y1=\"" << num(c.py(0))
    << "\" x2=\"" << num(c.px(style.extent)) << "\" y2=\"" << num(c.py(0)) << "\"/>\n";
  o << "  <line class=\"axis\" x1=\"" << num(c.px(0)) << "\" y1=\"" << num(c.py(-style.extent))
    << "\" x2=\"" << num(c.px(0)) << "\" y2=\"" << num(c.py(style.extent)) << "\"/>\n";
  const int lim = static_cast<int>(std::floor(style.extent));
  for (int k = -lim; k <= lim; ++k) {
    o << "  <text class=\"tick\" x=\"" << num(c.px(k)) << "\" y=\"" << num(style.margin + style.pixels + 14)
      << "\" text-anchor=\"middle\">" << k << "</text>\n";
    o << "  <text class=\"tick\" x=\"" << num(style.margin - 6) << "\" y=\"" << num(c.py(k) + 3)
      << "\" text-anchor=\"end\">" << k << "</text>\n";
  }

  o << "  <defs><clipPath id=\"area\"><rect x=\"" << num(style.margin) << "\" y=\"" << num(style.margin)
    << "\" width=\"" << num(style.pixels) << "\" height=\"" << num(style.pixels)
    << "\"/></clipPath></defs>\n";
  o << "  <g clip-path=\"url(#area)\">\n";
  if (task == TaskKind::kBoxesCond) {
    for (const Box& b : scene.prohibited) box(o, c, b, "condition");
    for (const Box& b : scene.targets) box(o, c, b, "truth");
  } else {
    for (const Box& b : scene.targets) box(o, c, b, "condition");
  }
  for (const PlotSample& s : samples) {
    for (const Box& b : s.boxes) box(o, c, b, "sample");
    const auto& tr = s.trajectory;
    if (tr.size() < 2 || tr.front().x.cols() < 2) continue;
    const double t_lo = std::min(tr.front().t, tr.back().t);
    const double t_hi = std::max(tr.front().t, tr.back().t);
    const double span = t_hi > t_lo ? t_hi - t_lo : 1.0;
    const std::size_t n = tr.front().x.rows();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k + 1 < tr.size(); ++k) {
        const double u = (0.5 * (tr[k].t + tr[k + 1].t) - t_lo) / span;
        o << "  <polyline class=\"path\" stroke=\"" << time_color(u) << "\" points=\""
          << num(c.px(tr[k].x.at(i, 0))) << ',' << num(c.py(tr[k].x.at(i, 1))) << ' '
          << num(c.px(tr[k + 1].x.at(i, 0))) << ',' << num(c.py(tr[k + 1].x.at(i, 1))) << "\"/>\n";
      }
    }
  }
  o << "  </g>\n</svg>\n";
  return o.str();
}

}  // namespace permflow::cli
