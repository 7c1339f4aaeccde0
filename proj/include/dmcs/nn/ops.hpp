#pragma once

// Layer primitives with explicit forward/backward passes. Convolutions are
// stride 1 (im2col + GEMM); pooling is 2x2/2 in ceil mode; upsampling is a
// per-channel transposed convolution fused with the crop that follows it.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dmcs/errors.hpp"
#include "dmcs/tensor.hpp"

namespace dmcs::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvShape {
  int cin = 0;
  int cout = 0;
  int kernel = 3;
  int pad = 1;

  int out_size(int in) const { return in + 2 * pad - kernel + 1; }
  int fan_in() const { return cin * kernel * kernel; }
  int fan_out() const { return cout * kernel * kernel; }
};

template <typename T>
void im2col(const Tensor<T>& in, int k, int pad, int oh, int ow, std::vector<T>& col) {
  const int h = in.height(), w = in.width();
  col.assign(static_cast<std::size_t>(in.channels()) * k * k * oh * ow, T(0));
  T* dst = col.data();
  for (int c = 0; c < in.channels(); ++c) {
    const T* src = in.channel(c);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, dst += static_cast<std::size_t>(oh) * ow) {
        const int x_lo = std::max(0, pad - kx), x_hi = std::min(ow, w + pad - kx);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h || x_lo >= x_hi) continue;
          const T* row = src + static_cast<std::size_t>(iy) * w + (kx - pad);
          T* out = dst + static_cast<std::size_t>(oy) * ow;
          std::copy(row + x_lo, row + x_hi, out + x_lo);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const std::vector<T>& col, int k, int pad, int oh, int ow, Tensor<T>& din) {
  const int h = din.height(), w = din.width();
  const T* srcp = col.data();
  for (int c = 0; c < din.channels(); ++c) {
    T* dst = din.channel(c);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, srcp += static_cast<std::size_t>(oh) * ow) {
        const int x_lo = std::max(0, pad - kx), x_hi = std::min(ow, w + pad - kx);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* row = dst + static_cast<std::size_t>(iy) * w + (kx - pad);
          const T* s = srcp + static_cast<std::size_t>(oy) * ow;
          for (int x = x_lo; x < x_hi; ++x) row[x] += s[x];
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& in, const T* weight, const T* bias, const ConvShape& s,
                         std::vector<T>& scratch) {
  if (in.channels() != s.cin)
    throw ShapeError("conv expects " + std::to_string(s.cin) + " channels, got " + in.shape_str());
  const int oh = s.out_size(in.height()), ow = s.out_size(in.width());
  if (oh < 1 || ow < 1) throw ShapeError("conv input " + in.shape_str() + " too small for kernel");
  Tensor<T> out(s.cout, oh, ow);
  const Eigen::Index n = static_cast<Eigen::Index>(oh) * ow;
  ConstMatMap<T> W(weight, s.cout, s.fan_in());
  MatMap<T> O(out.data(), s.cout, n);
  if (s.kernel == 1 && s.pad == 0) {
    O.noalias() = W * ConstMatMap<T>(in.data(), s.cin, n);
  } else {
    im2col(in, s.kernel, s.pad, oh, ow, scratch);
    O.noalias() = W * ConstMatMap<T>(scratch.data(), s.fan_in(), n);
  }
  for (int c = 0; c < s.cout; ++c) O.row(c).array() += bias[c];
  return out;
}

/// Accumulates weight/bias gradients; writes the input gradient when din is non-null.
template <typename T>
void conv2d_backward(const Tensor<T>& in, const T* weight, const ConvShape& s, const Tensor<T>& dout,
                     Tensor<T>* din, T* dweight, T* dbias, std::vector<T>& scratch) {
  const int oh = dout.height(), ow = dout.width();
  const Eigen::Index n = static_cast<Eigen::Index>(oh) * ow;
  ConstMatMap<T> dO(dout.data(), s.cout, n);
  const bool pointwise = s.kernel == 1 && s.pad == 0;
  if (dweight) {
    MatMap<T> dW(dweight, s.cout, s.fan_in());
    if (pointwise) {
      dW.noalias() += dO * ConstMatMap<T>(in.data(), s.cin, n).transpose();
    } else {
      im2col(in, s.kernel, s.pad, oh, ow, scratch);
      dW.noalias() += dO * ConstMatMap<T>(scratch.data(), s.fan_in(), n).transpose();
    }
  }
  // plain loop: Eigen's vectorized reduction depends on buffer alignment, which breaks run-to-run reproducibility
  if (dbias)
    for (int c = 0; c < s.cout; ++c) {
      const T* row = dout.data() + c * n;
      T acc = T(0);
      for (Eigen::Index i = 0; i < n; ++i) acc += row[i];
      dbias[c] += acc;
    }
  if (!din) return;
  *din = Tensor<T>(in.channels(), in.height(), in.width());
  ConstMatMap<T> W(weight, s.cout, s.fan_in());
  if (pointwise) {
    MatMap<T>(din->data(), s.cin, n).noalias() = W.transpose() * dO;
  } else {
    scratch.resize(static_cast<std::size_t>(s.fan_in()) * n);
    MatMap<T>(scratch.data(), s.fan_in(), n).noalias() = W.transpose() * dO;
    col2im_add(scratch, s.kernel, s.pad, oh, ow, *din);
  }
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.values()) v = v > T(0) ? v : T(0);
}

/// Masks the gradient by the post-activation output.
template <typename T>
void relu_backward_inplace(const Tensor<T>& out, Tensor<T>& grad) {
  const T* o = out.data();
  T* g = grad.data();
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(o[i] > T(0))) g[i] = T(0);
}

inline int pool_out_size(int in) { return in < 1 ? 0 : (in + 1) / 2; }

template <typename T>
Tensor<T> maxpool_forward(const Tensor<T>& in, std::vector<int>& argmax) {
  const int h = in.height(), w = in.width();
  const int oh = pool_out_size(h), ow = pool_out_size(w);
  Tensor<T> out(in.channels(), oh, ow);
  argmax.assign(out.size(), 0);
  std::size_t o = 0;
  for (int c = 0; c < in.channels(); ++c) {
    const T* src = in.channel(c);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x, ++o) {
        int best = -1;
        T bv = -std::numeric_limits<T>::infinity();
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int iy = 2 * y + dy, ix = 2 * x + dx;
            if (iy >= h || ix >= w) continue;
            const int idx = iy * w + ix;
            if (best < 0 || src[idx] > bv) {
              bv = src[idx];
              best = idx;
            }
          }
        out.data()[o] = bv;
        argmax[o] = best;
      }
  }
  return out;
}

template <typename T>
void maxpool_backward_add(const Tensor<T>& dout, const std::vector<int>& argmax, Tensor<T>& din) {
  std::size_t o = 0;
  const std::size_t plane_out = dout.plane();
  for (int c = 0; c < dout.channels(); ++c) {
    T* d = din.channel(c);
    for (std::size_t i = 0; i < plane_out; ++i, ++o) d[argmax[o]] += dout.data()[o];
  }
}

/// Bilinear interpolation kernel for a transposed convolution of the given size.
template <typename T>
std::vector<T> bilinear_kernel(int k) {
  const int f = (k + 1) / 2;
  const double center = (k % 2 == 1) ? f - 1 : f - 0.5;
  std::vector<T> out(static_cast<std::size_t>(k) * k);
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x)
      out[static_cast<std::size_t>(y) * k + x] =
          static_cast<T>((1 - std::abs(y - center) / f) * (1 - std::abs(x - center) / f));
  return out;
}

struct UpsampleShape {
  int channels = 1;
  int factor = 1;   // stride; 1 with kernel 1 means crop only
  int kernel = 1;
  int offset = 0;   // crop offset into the full transposed-conv output

  int full_size(int in) const { return (in - 1) * factor + kernel; }
};

/// out(c, y, x) = sum_i in(c, i) * K(c, y + offset - factor * i); kernel may be null for crop-only.
template <typename T>
Tensor<T> upsample_crop_forward(const Tensor<T>& in, const T* kernel, const UpsampleShape& s, int out_h,
                                int out_w) {
  if (s.full_size(in.height()) < s.offset + out_h || s.full_size(in.width()) < s.offset + out_w)
    throw ShapeError("upsampled map " + std::to_string(s.full_size(in.height())) + "x" +
                     std::to_string(s.full_size(in.width())) + " cannot be cropped at offset " +
                     std::to_string(s.offset) + " to " + std::to_string(out_h) + "x" + std::to_string(out_w));
  Tensor<T> out(in.channels(), out_h, out_w);
  const int f = s.factor, k = s.kernel;
  for (int c = 0; c < in.channels(); ++c) {
    const T* src = in.channel(c);
    const T* K = kernel ? kernel + static_cast<std::size_t>(c) * k * k : nullptr;
    T* dst = out.channel(c);
    for (int y = 0; y < out_h; ++y) {
      const int uy = y + s.offset;
      const int iy_lo = std::max(0, (uy - k + f) / f), iy_hi = std::min(in.height() - 1, uy / f);
      for (int x = 0; x < out_w; ++x) {
        const int ux = x + s.offset;
        const int ix_lo = std::max(0, (ux - k + f) / f), ix_hi = std::min(in.width() - 1, ux / f);
        T acc = T(0);
        for (int iy = iy_lo; iy <= iy_hi; ++iy)
          for (int ix = ix_lo; ix <= ix_hi; ++ix) {
            const T kv = K ? K[(uy - f * iy) * k + (ux - f * ix)] : T(1);
            acc += src[iy * in.width() + ix] * kv;
          }
        dst[y * out_w + x] = acc;
      }
    }
  }
  return out;
}

template <typename T>
void upsample_crop_backward(const Tensor<T>& in, const T* kernel, const UpsampleShape& s, const Tensor<T>& dout,
                            Tensor<T>* din, T* dkernel) {
  if (din) *din = Tensor<T>(in.channels(), in.height(), in.width());
  const int f = s.factor, k = s.kernel;
  const int out_h = dout.height(), out_w = dout.width();
  for (int c = 0; c < in.channels(); ++c) {
    const T* src = in.channel(c);
    const T* K = kernel ? kernel + static_cast<std::size_t>(c) * k * k : nullptr;
    T* dK = dkernel ? dkernel + static_cast<std::size_t>(c) * k * k : nullptr;
    T* di = din ? din->channel(c) : nullptr;
    const T* g = dout.channel(c);
    for (int y = 0; y < out_h; ++y) {
      const int uy = y + s.offset;
      const int iy_lo = std::max(0, (uy - k + f) / f), iy_hi = std::min(in.height() - 1, uy / f);
      for (int x = 0; x < out_w; ++x) {
        const T gv = g[y * out_w + x];
        const int ux = x + s.offset;
        const int ix_lo = std::max(0, (ux - k + f) / f), ix_hi = std::min(in.width() - 1, ux / f);
        for (int iy = iy_lo; iy <= iy_hi; ++iy)
          for (int ix = ix_lo; ix <= ix_hi; ++ix) {
            const int kidx = (uy - f * iy) * k + (ux - f * ix);
            if (di) di[iy * in.width() + ix] += gv * (K ? K[kidx] : T(1));
            if (dK) dK[kidx] += gv * src[iy * in.width() + ix];
          }
      }
    }
  }
}

/// Copies rows [y0, y0+h) x cols [x0, x0+w) of every channel; outside reads are zero.
template <typename T>
Tensor<T> extract_window(const Tensor<T>& in, int y0, int x0, int h, int w) {
  Tensor<T> out(in.channels(), h, w);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < h; ++y) {
      const int iy = y0 + y;
      if (iy < 0 || iy >= in.height()) continue;
      for (int x = 0; x < w; ++x) {
        const int ix = x0 + x;
        if (ix >= 0 && ix < in.width()) out(c, y, x) = in(c, iy, ix);
      }
    }
  return out;
}

template <typename T>
void scatter_window_add(const Tensor<T>& win, int y0, int x0, Tensor<T>& dst) {
  for (int c = 0; c < win.channels(); ++c)
    for (int y = 0; y < win.height(); ++y) {
      const int iy = y0 + y;
      if (iy < 0 || iy >= dst.height()) continue;
      for (int x = 0; x < win.width(); ++x) {
        const int ix = x0 + x;
        if (ix >= 0 && ix < dst.width()) dst(c, iy, ix) += win(c, y, x);
      }
    }
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> out(logits.channels(), logits.height(), logits.width());
  const std::size_t n = logits.plane();
  const int k = logits.channels();
  for (std::size_t i = 0; i < n; ++i) {
    T mx = logits.channel(0)[i];
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits.channel(c)[i]);
    T sum = T(0);
    for (int c = 0; c < k; ++c) {
      const T e = std::exp(logits.channel(c)[i] - mx);
      out.channel(c)[i] = e;
      sum += e;
    }
    for (int c = 0; c < k; ++c) out.channel(c)[i] /= sum;
  }
  return out;
}

template <typename T>
T sigmoid(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& logits) {
  Tensor<T> out(logits.channels(), logits.height(), logits.width());
  for (std::size_t i = 0; i < logits.size(); ++i) out.data()[i] = sigmoid(logits.data()[i]);
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_spatial(b))
    throw ShapeError("cannot concatenate " + a.shape_str() + " with " + b.shape_str());
  Tensor<T> out(a.channels() + b.channels(), a.height(), a.width());
  std::copy(a.values().begin(), a.values().end(), out.data());
  std::copy(b.values().begin(), b.values().end(), out.data() + a.size());
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  if (src.empty()) return;
  if (dst.empty()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

}  // namespace dmcs::nn
