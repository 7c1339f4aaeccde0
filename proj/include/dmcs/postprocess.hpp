#pragma once

// Turns the fused probability map and the fused edge probability into an
// instance map: threshold, suppress edges, label components, drop small ones,
// fill holes, grow back by the suppressed margin.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "dmcs/core.hpp"

namespace dmcs {

using BinaryMask = Grid<std::uint8_t>;

struct PostprocessConfig {
  double tau_g = 0.5;           // gland probability threshold
  bool edge_suppression = true;
  double tau_e = 0.5;           // edge probability threshold
  int min_area = 100;           // pixels
  bool fill_holes = true;
  int dilation_radius = 2;      // pixels; matches the default training edge thickness

  /// Minimum area scaled to 0.25% of the image, for small desk-scale images.
  static PostprocessConfig for_image(int height, int width) {
    PostprocessConfig c;
    c.min_area = std::min(100, static_cast<int>(std::lround(0.0025 * height * width)));
    return c;
  }

  void validate() const {
    if (!(tau_g > 0 && tau_g <= 1)) throw UsageError("tau_g must lie in (0, 1]");
    if (!(tau_e > 0 && tau_e <= 1)) throw UsageError("tau_e must lie in (0, 1]");
    if (min_area < 0) throw UsageError("min_area must be >= 0");
    if (dilation_radius < 0) throw UsageError("dilation radius must be >= 0");
  }
};

/// 4-connected component labelling (two-pass union-find), canonical ids.
inline InstanceMap connected_components(const BinaryMask& mask) {
  const int h = mask.height, w = mask.width;
  std::vector<std::uint32_t> label(mask.size(), 0);
  std::vector<std::uint32_t> parent{0};
  auto find = [&parent](std::uint32_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask(y, x)) continue;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const std::uint32_t up = y > 0 && mask(y - 1, x) ? label[i - w] : 0;
      const std::uint32_t left = x > 0 && mask(y, x - 1) ? label[i - 1] : 0;
      if (!up && !left) {
        parent.push_back(static_cast<std::uint32_t>(parent.size()));
        label[i] = static_cast<std::uint32_t>(parent.size() - 1);
      } else if (up && left) {
        const auto a = find(up), b = find(left);
        label[i] = std::min(a, b);
        parent[std::max(a, b)] = std::min(a, b);
      } else {
        label[i] = up ? up : left;
      }
    }
  InstanceMap out(h, w, 0);
  std::vector<std::uint32_t> remap(parent.size(), 0);
  std::uint32_t next = 0;
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (!label[i]) continue;
    const auto root = find(label[i]);
    if (!remap[root]) {
      if (next == std::numeric_limits<std::uint16_t>::max()) throw DataError("more than 65535 components");
      remap[root] = ++next;
    }
    out.values[i] = static_cast<std::uint16_t>(remap[root]);
  }
  return out;
}

inline InstanceMap remove_small_components(const InstanceMap& inst, int min_area) {
  const auto area = instance_areas(inst);
  InstanceMap out = inst;
  for (auto& v : out.values)
    if (v && static_cast<int>(area[v]) < min_area) v = 0;
  return canonicalize_instances(out);
}

/// Fills background regions that do not touch the border and are enclosed by a single instance.
inline InstanceMap fill_instance_holes(const InstanceMap& inst) {
  const int h = inst.height, w = inst.width;
  BinaryMask bg(h, w, 0);
  for (std::size_t i = 0; i < inst.size(); ++i) bg.values[i] = inst.values[i] == 0;
  const InstanceMap holes = connected_components(bg);
  const auto n = instance_areas(holes).size();
  constexpr std::uint32_t kNone = 0, kMany = std::numeric_limits<std::uint32_t>::max();
  std::vector<std::uint32_t> owner(n, kNone);
  std::vector<bool> border(n, false);
  static constexpr int dy[4] = {-1, 1, 0, 0};
  static constexpr int dx[4] = {0, 0, -1, 1};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto hid = holes(y, x);
      if (!hid) continue;
      if (y == 0 || x == 0 || y == h - 1 || x == w - 1) border[hid] = true;
      for (int k = 0; k < 4; ++k) {
        const int ny = y + dy[k], nx = x + dx[k];
        if (!inst.in_bounds(ny, nx) || !inst(ny, nx)) continue;
        const std::uint32_t id = inst(ny, nx);
        if (owner[hid] == kNone) owner[hid] = id;
        else if (owner[hid] != id) owner[hid] = kMany;
      }
    }
  InstanceMap out = inst;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto hid = holes.values[i];
    if (hid && !border[hid] && owner[hid] != kNone && owner[hid] != kMany)
      out.values[i] = static_cast<std::uint16_t>(owner[hid]);
  }
  return out;
}

/// Grows instances into background within Chebyshev radius r. Each claimed pixel
/// goes to the instance with the nearest (Euclidean) pixel; ties go to the lower id.
inline InstanceMap dilate_instances(const InstanceMap& inst, int radius) {
  if (radius <= 0) return inst;
  InstanceMap out = inst;
  for (int y = 0; y < inst.height; ++y)
    for (int x = 0; x < inst.width; ++x) {
      if (inst(y, x)) continue;
      int best_d = std::numeric_limits<int>::max();
      std::uint16_t best_id = 0;
      for (int yy = std::max(0, y - radius); yy <= std::min(inst.height - 1, y + radius); ++yy)
        for (int xx = std::max(0, x - radius); xx <= std::min(inst.width - 1, x + radius); ++xx) {
          const auto id = inst(yy, xx);
          if (!id) continue;
          const int d = (yy - y) * (yy - y) + (xx - x) * (xx - x);
          if (d < best_d || (d == best_d && id < best_id)) {
            best_d = d;
            best_id = id;
          }
        }
      out(y, x) = best_id;
    }
  return out;
}

/// Foreground mask from a probability map: P(not background) >= tau_g, minus
/// pixels whose edge probability is >= tau_e when suppression is on. tau_e = 1
/// turns suppression off; a saturated sigmoid can return exactly 1.
template <typename T>
BinaryMask foreground_mask(const Tensor<T>& probs, const Tensor<T>* edge_prob, const PostprocessConfig& cfg) {
  BinaryMask mask(probs.height(), probs.width(), 0);
  for (std::size_t i = 0; i < probs.plane(); ++i) {
    const double fg = 1.0 - static_cast<double>(probs.channel(0)[i]);
    bool on = fg >= cfg.tau_g;
    if (on && cfg.edge_suppression && edge_prob && cfg.tau_e < 1) on = static_cast<double>(edge_prob->data()[i]) < cfg.tau_e;
    mask.values[i] = on ? 1 : 0;
  }
  return mask;
}

template <typename T>
InstanceMap extract_instances(const ProbabilityMap<T>& probs, const Tensor<T>* edge_prob,
                              const PostprocessConfig& cfg) {
  cfg.validate();
  if (edge_prob && (edge_prob->height() != probs.height() || edge_prob->width() != probs.width()))
    throw ShapeError("edge probability " + edge_prob->shape_str() + " does not match " +
                     probs.tensor().shape_str());
  InstanceMap inst = connected_components(foreground_mask(probs.tensor(), edge_prob, cfg));
  inst = remove_small_components(inst, cfg.min_area);
  if (cfg.fill_holes) inst = fill_instance_holes(inst);
  inst = dilate_instances(inst, cfg.dilation_radius);
  return canonicalize_instances(inst);
}

}  // namespace dmcs
