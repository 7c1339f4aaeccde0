#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "dmcs/errors.hpp"

namespace dmcs {

inline std::string dims_str(int c, int h, int w) {
  return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

// Dense channel-major (C, H, W) tensor.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : c_(channels), h_(height), w_(width),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {
    if (channels < 0 || height < 0 || width < 0)
      throw ShapeError("negative tensor dimension " + dims_str(channels, height, width));
  }

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int c, int y, int x) { return data_[(c * plane()) + static_cast<std::size_t>(y) * w_ + x]; }
  const T& operator()(int c, int y, int x) const {
    return data_[(c * plane()) + static_cast<std::size_t>(y) * w_ + x];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* channel(int c) { return data_.data() + c * plane(); }
  const T* channel(int c) const { return data_.data() + c * plane(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const { return c_ == o.c_ && h_ == o.h_ && w_ == o.w_; }
  bool same_spatial(const Tensor& o) const { return h_ == o.h_ && w_ == o.w_; }
  std::string shape_str() const { return dims_str(c_, h_, w_); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(c_, h_, w_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  int c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> data_;
};

// Single-channel raster of discrete values.
template <typename V>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<V> values;

  Grid() = default;
  Grid(int h, int w, V fill = V{}) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {
    if (h < 0 || w < 0) throw ShapeError("negative grid dimension");
  }

  V& operator()(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  const V& operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return values.size(); }
  bool in_bounds(int y, int x) const { return y >= 0 && x >= 0 && y < height && x < width; }
  template <typename O>
  bool same_size(const Grid<O>& o) const { return height == o.height && width == o.width; }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.height == b.height && a.width == b.width && a.values == b.values;
  }
};

template <typename A, typename B>
void require_same_size(const A& a, const B& b, const char* what) {
  if (a.height != b.height || a.width != b.width)
    throw ShapeError(std::string(what) + ": size mismatch " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width));
}

}  // namespace dmcs
