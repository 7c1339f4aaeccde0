#pragma once

// Domain types and the label-map algebra shared by every stage of the pipeline.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "dmcs/errors.hpp"
#include "dmcs/tensor.hpp"

namespace dmcs {

using ImageTensor = Tensor<float>;

/// Semantic labels in {0, ..., num_classes}; 0 is background.
struct LabelMap : Grid<std::uint8_t> {
  int num_classes = 1;

  LabelMap() = default;
  LabelMap(int h, int w, int k = 1) : Grid(h, w, 0), num_classes(k) {}
};

/// Binary boundary map.
struct EdgeMap : Grid<std::uint8_t> {
  using Grid::Grid;
};

/// Per-pixel object identity; 0 is background, each positive id one object.
struct InstanceMap : Grid<std::uint16_t> {
  using Grid::Grid;
};

inline constexpr double kProbabilitySumTolerance = 1e-6;

/// Per-pixel class distribution over num_classes + 1 channels. The sum-to-one
/// invariant is checked on construction.
template <typename T>
class ProbabilityMap {
 public:
  ProbabilityMap() = default;
  explicit ProbabilityMap(Tensor<T> probs) : p_(std::move(probs)) {
    const std::size_t n = p_.plane();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (int c = 0; c < p_.channels(); ++c) {
        const double v = p_.channel(c)[i];
        if (!(v >= 0.0 && v <= 1.0))
          throw NumericError("probability out of [0,1] at pixel " + std::to_string(i));
        s += v;
      }
      if (std::abs(s - 1.0) > kProbabilitySumTolerance)
        throw NumericError("probabilities at pixel " + std::to_string(i) + " sum to " + std::to_string(s));
    }
  }

  int height() const { return p_.height(); }
  int width() const { return p_.width(); }
  int channels() const { return p_.channels(); }
  T operator()(int c, int y, int x) const { return p_(c, y, x); }
  const Tensor<T>& tensor() const { return p_; }

 private:
  Tensor<T> p_;
};

struct TrainingSample {
  ImageTensor image;
  LabelMap labels;
  EdgeMap edges;
  InstanceMap instances;
  std::string id;
};

inline void validate_image(const ImageTensor& img) {
  if (img.height() < 1 || img.width() < 1 || img.channels() < 1)
    throw ShapeError("image must be at least 1x1 with one channel, got " + img.shape_str());
  for (float v : img.values())
    if (!std::isfinite(v)) throw NumericError("image contains non-finite values");
}

inline void validate_labels(const LabelMap& labels) {
  for (auto v : labels.values)
    if (v > labels.num_classes)
      throw DataError("label " + std::to_string(v) + " exceeds class count " +
                      std::to_string(labels.num_classes));
}

inline void validate_edges(const EdgeMap& edges) {
  for (auto v : edges.values)
    if (v > 1) throw DataError("edge map is not binary");
}

/// Labels every foreground pixel with class 1, or with class_of[id] when a table is given.
inline LabelMap instance_to_semantic(const InstanceMap& inst,
                                     const std::map<std::uint16_t, std::uint8_t>& class_of = {},
                                     int num_classes = 1) {
  LabelMap out(inst.height, inst.width, num_classes);
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const auto id = inst.values[i];
    if (id == 0) continue;
    if (class_of.empty()) {
      out.values[i] = 1;
    } else {
      auto it = class_of.find(id);
      if (it == class_of.end()) throw DataError("no class for instance id " + std::to_string(id));
      out.values[i] = it->second;
    }
  }
  validate_labels(out);
  return out;
}

/// A foreground pixel is a boundary seed when a 4-neighbour inside the image
/// carries a different id. Edge pixels are the foreground pixels within
/// Chebyshev distance thickness-1 of a seed, so thickness 1 gives the seeds only.
inline EdgeMap instance_to_edges(const InstanceMap& inst, int thickness) {
  if (thickness < 1) throw UsageError("edge thickness must be >= 1");
  const int h = inst.height, w = inst.width;
  EdgeMap out(h, w, 0);
  const int r = thickness - 1;
  static constexpr int dy[4] = {-1, 1, 0, 0};
  static constexpr int dx[4] = {0, 0, -1, 1};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto id = inst(y, x);
      if (id == 0) continue;
      bool seed = false;
      for (int k = 0; k < 4 && !seed; ++k) {
        const int ny = y + dy[k], nx = x + dx[k];
        seed = inst.in_bounds(ny, nx) && inst(ny, nx) != id;
      }
      if (!seed) continue;
      for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy)
        for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx)
          if (inst(yy, xx) != 0) out(yy, xx) = 1;
    }
  }
  return out;
}

/// Relabels positive ids to 1..n in order of first appearance in raster scan.
inline InstanceMap canonicalize_instances(const InstanceMap& inst) {
  InstanceMap out(inst.height, inst.width, 0);
  std::unordered_map<std::uint16_t, std::uint16_t> remap;
  std::uint16_t next = 1;
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const auto id = inst.values[i];
    if (id == 0) continue;
    auto [it, inserted] = remap.try_emplace(id, next);
    if (inserted) ++next;
    out.values[i] = it->second;
  }
  return out;
}

inline int count_instances(const InstanceMap& inst) {
  std::vector<bool> seen(65536, false);
  int n = 0;
  for (auto v : inst.values) {
    if (v != 0 && !seen[v]) {
      seen[v] = true;
      ++n;
    }
  }
  return n;
}

/// Pixel count per id (index 0 holds the background count).
inline std::vector<std::size_t> instance_areas(const InstanceMap& inst) {
  std::uint16_t mx = 0;
  for (auto v : inst.values) mx = std::max(mx, v);
  std::vector<std::size_t> area(static_cast<std::size_t>(mx) + 1, 0);
  for (auto v : inst.values) ++area[v];
  return area;
}

inline bool is_canonical(const InstanceMap& inst) { return canonicalize_instances(inst) == inst; }

inline TrainingSample make_sample(ImageTensor image, const InstanceMap& instances, std::string id,
                                  int edge_thickness) {
  validate_image(image);
  if (image.height() != instances.height || image.width() != instances.width)
    throw ShapeError("sample '" + id + "': image " + image.shape_str() + " vs annotation " +
                     std::to_string(instances.height) + "x" + std::to_string(instances.width));
  TrainingSample s;
  s.instances = canonicalize_instances(instances);
  s.labels = instance_to_semantic(s.instances);
  s.edges = instance_to_edges(s.instances, edge_thickness);
  s.image = std::move(image);
  s.id = std::move(id);
  return s;
}

}  // namespace dmcs
