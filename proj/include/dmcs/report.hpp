#pragma once

// Figures: instance overlays on the input image, side-by-side sheets, and loss
// curves rendered straight to PNG.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "dmcs/core.hpp"
#include "dmcs/image_io.hpp"
#include "dmcs/metrics.hpp"

namespace dmcs {

using Rgb = std::array<std::uint8_t, 3>;

/// Deterministic colour per instance id: hashed hue, full saturation.
inline Rgb instance_color(std::uint16_t id) {
  std::uint32_t h = id * 2654435761u;
  h ^= h >> 15;
  const double hue = (h % 360) / 60.0;
  const double x = 1 - std::abs(std::fmod(hue, 2.0) - 1);
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hue)) {
    case 0: r = 1, g = x; break;
    case 1: r = x, g = 1; break;
    case 2: g = 1, b = x; break;
    case 3: g = x, b = 1; break;
    case 4: r = x, b = 1; break;
    default: r = 1, b = x; break;
  }
  return {static_cast<std::uint8_t>(std::lround(255 * r)), static_cast<std::uint8_t>(std::lround(255 * g)),
          static_cast<std::uint8_t>(std::lround(255 * b))};
}

/// Blends instance colours over the image; object boundaries drawn solid. Background pixels are untouched.
inline ImageTensor overlay_instances(const ImageTensor& image, const InstanceMap& inst, double alpha = 0.45) {
  require_same_size(inst, Grid<std::uint8_t>(image.height(), image.width()), "overlay");
  ImageTensor out(3, image.height(), image.width());
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      const auto id = inst(y, x);
      for (int k = 0; k < 3; ++k) out(k, y, x) = image(std::min(k, image.channels() - 1), y, x);
      if (!id) continue;
      bool boundary = false;
      const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
      for (int j = 0; j < 4; ++j) boundary = boundary || (inst.in_bounds(ny[j], nx[j]) && inst(ny[j], nx[j]) != id);
      const auto c = instance_color(id);
      const double a = boundary ? 1.0 : alpha;
      for (int k = 0; k < 3; ++k) out(k, y, x) = static_cast<float>((1 - a) * out(k, y, x) + a * c[k]);
    }
  return out;
}

/// Panels placed left to right with a gap of `gap` white pixels; heights may differ.
inline ImageTensor side_by_side(const std::vector<ImageTensor>& panels, int gap = 4) {
  int w = 0, h = 0;
  for (const auto& p : panels) {
    w += p.width();
    h = std::max(h, p.height());
  }
  w += gap * std::max<int>(0, static_cast<int>(panels.size()) - 1);
  ImageTensor out(3, h, w, 255.f);
  int x0 = 0;
  for (const auto& p : panels) {
    for (int y = 0; y < p.height(); ++y)
      for (int x = 0; x < p.width(); ++x)
        for (int k = 0; k < 3; ++k) out(k, y, x0 + x) = p(std::min(k, p.channels() - 1), y, x);
    x0 += p.width() + gap;
  }
  return out;
}

namespace detail {

inline void draw_line(ImageTensor& img, double x0, double y0, double x1, double y1, const Rgb& c) {
  const int n = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0))), y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) continue;
    for (int k = 0; k < 3; ++k) img(k, y, x) = c[k];
  }
}

}  // namespace detail

/// Line plot of a series on a white canvas with a frame and light horizontal grid.
/// The vertical axis is logarithmic when every value is positive and the range spans
/// more than a decade.
inline ImageTensor plot_series(const std::vector<double>& values, int width = 480, int height = 320) {
  ImageTensor img(3, height, width, 255.f);
  const int left = 30, right = width - 10, top = 10, bottom = height - 25;
  const Rgb frame{60, 60, 60}, grid{225, 225, 225}, line{200, 40, 40};
  for (int i = 1; i < 5; ++i) {
    const double y = top + (bottom - top) * i / 5.0;
    detail::draw_line(img, left, y, right, y, grid);
  }
  detail::draw_line(img, left, top, left, bottom, frame);
  detail::draw_line(img, left, bottom, right, bottom, frame);
  std::vector<double> v;
  for (double d : values)
    if (std::isfinite(d)) v.push_back(d);
  if (v.empty()) return img;
  double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
  const bool logy = lo > 0 && hi / lo > 10;
  auto tr = [logy](double d) { return logy ? std::log10(d) : d; };
  double tlo = tr(lo), thi = tr(hi);
  if (thi - tlo < 1e-12) {
    tlo -= 0.5;
    thi += 0.5;
  }
  auto px = [&](std::size_t i) { return left + (right - left) * (v.size() == 1 ? 0.5 : double(i) / (v.size() - 1)); };
  auto py = [&](double d) { return bottom - (bottom - top) * (tr(d) - tlo) / (thi - tlo); };
  for (std::size_t i = 0; i + 1 < v.size(); ++i) detail::draw_line(img, px(i), py(v[i]), px(i + 1), py(v[i + 1]), line);
  if (v.size() == 1) detail::draw_line(img, px(0) - 2, py(v[0]), px(0) + 2, py(v[0]), line);
  return img;
}

/// Rank table as tab-separated text; ranks omitted when `ranked` is empty.
inline void write_rank_table(std::ostream& out, const std::vector<ScoreRow>& rows, const std::vector<RankedRow>& ranked) {
  out << "method";
  for (const auto& n : kScoreNames) out << '\t' << n;
  if (!ranked.empty()) {
    for (const auto& n : kScoreNames) out << '\t' << n << "_rank";
    out << "\trank_sum";
  }
  out << '\n';
  out.precision(6);
  if (ranked.empty()) {
    for (const auto& r : rows) {
      out << r.method;
      for (double s : r.scores) out << '\t' << s;
      out << '\n';
    }
    return;
  }
  for (const auto& r : ranked) {
    out << r.method;
    for (double s : r.scores) out << '\t' << s;
    for (int k : r.ranks) out << '\t' << k;
    out << '\t' << r.rank_sum << '\n';
  }
}

}  // namespace dmcs
