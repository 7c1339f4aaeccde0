#pragma once

// The three-channel network: an FCN32s-style region channel, an edge channel
// with one deeply supervised side output before every pooling stage, and a
// small fully convolutional fusion network over the concatenated channel outputs.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "dmcs/core.hpp"
#include "dmcs/nn/ops.hpp"
#include "dmcs/nn/params.hpp"

namespace dmcs {

inline constexpr int kSideOutputs = 5;

struct ArchConfig {
  int num_classes = 1;  // K; the networks emit K + 1 channels
  int input_channels = 3;
  std::array<int, kSideOutputs> trunk_widths{64, 128, 256, 512, 512};
  std::array<int, kSideOutputs> convs_per_stage{2, 2, 3, 3, 3};
  int fc_width = 4096;
  int fc_kernel = 7;
  int first_pad = 100;
  std::array<int, 4> fusion_widths{64, 64, 128, 128};
  std::array<int, 2> fusion_fc{256, 256};

  /// Every width multiplied by `factor` (rounded, at least 1).
  ArchConfig scaled(double factor) const {
    if (!(factor > 0)) throw UsageError("architecture scale must be positive");
    auto sc = [factor](int c) { return std::max(1, static_cast<int>(std::lround(c * factor))); };
    ArchConfig out = *this;
    for (auto& c : out.trunk_widths) c = sc(c);
    for (auto& c : out.fusion_widths) c = sc(c);
    for (auto& c : out.fusion_fc) c = sc(c);
    out.fc_width = sc(fc_width);
    return out;
  }

  std::string describe() const {
    std::ostringstream os;
    os << "K=" << num_classes << ";in=" << input_channels << ";trunk=";
    for (int i = 0; i < kSideOutputs; ++i) os << (i ? "," : "") << trunk_widths[i] << "x" << convs_per_stage[i];
    os << ";fc=" << fc_width << "k" << fc_kernel << ";pad=" << first_pad << ";fusion=";
    for (int i = 0; i < 4; ++i) os << (i ? "," : "") << fusion_widths[i];
    os << "/" << fusion_fc[0] << "," << fusion_fc[1];
    return os.str();
  }

  /// FNV-1a over describe(); stable across platforms.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : describe()) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

  void validate() const {
    if (num_classes < 1) throw UsageError("num_classes must be >= 1");
    for (int i = 0; i < kSideOutputs; ++i)
      if (trunk_widths[i] < 1 || convs_per_stage[i] < 1) throw UsageError("trunk stages need >= 1 conv");
    if (fc_kernel < 1 || fc_width < 1 || first_pad < 0) throw UsageError("invalid fully connected head");
  }
};

/// Feature-to-input coordinate map: input = scale * feature + shift, for pixel centres.
struct CoordMap {
  double scale = 1;
  double shift = 0;

  CoordMap conv(int kernel, int pad) const { return {scale, shift + scale * ((kernel - 1) / 2.0 - pad)}; }
  CoordMap pool() const { return {2 * scale, shift + scale * 0.5}; }

  /// Crop offset that aligns a transposed convolution (stride factor, given kernel)
  /// of this feature map with the input grid. Must be a non-negative integer.
  int crop_offset(int factor, int kernel) const {
    if (scale != factor) throw UsageError("upsampling factor does not undo the feature stride");
    const double off = (kernel - 1) / 2.0 - shift;
    if (off < 0 || off != std::floor(off))
      throw UsageError("architecture cannot be aligned: crop offset " + std::to_string(off) + " (first_pad too small?)");
    return static_cast<int>(off);
  }
};

enum class InitPolicy { keep, xavier, bilinear };

inline InitPolicy parse_init_policy(const std::string& s) {
  if (s == "keep") return InitPolicy::keep;
  if (s == "xavier") return InitPolicy::xavier;
  if (s == "bilinear") return InitPolicy::bilinear;
  throw UsageError("unknown init policy '" + s + "'");
}

inline const char* init_policy_name(InitPolicy p) {
  switch (p) {
    case InitPolicy::keep: return "keep";
    case InitPolicy::xavier: return "xavier";
    case InitPolicy::bilinear: return "bilinear";
  }
  return "?";
}

/// Which channels a forward pass evaluates. The fusion channel needs the other two.
struct Channels {
  bool region = true;
  bool edge = true;
  bool fusion = true;

  static Channels region_only() { return {true, false, false}; }
  static Channels edge_only() { return {false, true, false}; }
  static Channels all() { return {true, true, true}; }
};

template <typename T>
struct ForwardOutputs {
  Tensor<T> region_scores;                            // O_r
  ProbabilityMap<T> region_probs;                     // P_r
  std::array<Tensor<T>, kSideOutputs> side_logits;    // h(X, w, w_e^(m))
  std::array<Tensor<T>, kSideOutputs> side_probs;     // P_e^(m)
  Tensor<T> fused_edge_logit;                         // O_e^(0)
  Tensor<T> fused_edge_prob;                          // P_e^(0)
  Tensor<T> fusion_logits;
  ProbabilityMap<T> fusion_probs;                     // P_f
};

/// Gradients of a scalar objective with respect to the network outputs.
/// Empty tensors mean zero.
template <typename T>
struct OutputGrads {
  Tensor<T> region_scores;
  std::array<Tensor<T>, kSideOutputs> side_logits;
  Tensor<T> fused_edge_logit;
  Tensor<T> fusion_logits;
};

template <typename T>
struct ForwardCache {
  Tensor<T> input;
  std::array<std::vector<Tensor<T>>, kSideOutputs> stage_out;  // post-ReLU per conv
  std::array<Tensor<T>, kSideOutputs> pooled;
  std::array<std::vector<int>, kSideOutputs> pool_argmax;
  Channels channels;
  // region head
  Tensor<T> fc6, fc7, score;
  // edge branches
  std::array<int, kSideOutputs> win_y0{}, win_x0{};
  std::array<Tensor<T>, kSideOutputs> win_in, win_conv, win_logit;
  std::array<Tensor<T>, kSideOutputs> side_logits;
  // fusion network
  Tensor<T> fusion_in;
  std::array<Tensor<T>, 4> fusion_conv;
  std::array<Tensor<T>, 2> fusion_pooled;
  std::array<std::vector<int>, 2> fusion_argmax;
  std::array<Tensor<T>, 3> fusion_fc;
};

template <typename T>
class DmcsNet {
 public:
  struct Conv {
    nn::ConvShape shape;
    int weight = -1;
    int bias = -1;
    bool relu = true;
  };
  struct Upsample {
    nn::UpsampleShape shape;
    int kernel = -1;  // -1: crop only
  };
  struct Branch {
    Conv conv3;
    Conv conv1;
    Upsample up;
  };

  explicit DmcsNet(ArchConfig arch, std::uint64_t seed = 0) : arch_(std::move(arch)) {
    arch_.validate();
    build();
    for (nn::Group g : nn::kAllGroups) initialize_group(g, InitPolicy::xavier, seed);
  }

  const ArchConfig& arch() const { return arch_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }
  int num_outputs() const { return arch_.num_classes + 1; }
  const Upsample& region_upsample() const { return region_up_; }
  const Branch& branch(int m) const { return branches_[m]; }
  const Upsample& fusion_upsample() const { return fusion_up_; }
  int fuse_weight_index() const { return fuse_w_; }

  /// xavier: fresh Xavier conv weights, zero biases, bilinear upsampling kernels,
  /// uniform 1/M edge fusion weights. bilinear: reset upsampling kernels only.
  void initialize_group(nn::Group g, InitPolicy policy, std::uint64_t seed) {
    if (policy == InitPolicy::keep) return;
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(g) + 1);
    for (auto& p : params_) {
      if (p.group != g) continue;
      if (p.kind == nn::ParamKind::upsample) {
        const int k = p.shape[1];
        const auto kern = nn::bilinear_kernel<T>(k);
        for (int c = 0; c < p.shape[0]; ++c) std::copy(kern.begin(), kern.end(), p.value.begin() + c * k * k);
        continue;
      }
      if (policy != InitPolicy::xavier) continue;
      switch (p.kind) {
        case nn::ParamKind::conv_weight: nn::xavier_fill(p, rng); break;
        case nn::ParamKind::bias: std::fill(p.value.begin(), p.value.end(), T(0)); break;
        case nn::ParamKind::fuse_weight:
          std::fill(p.value.begin(), p.value.end(), T(1) / T(kSideOutputs));
          break;
        default: break;
      }
    }
  }

  ForwardOutputs<T> forward(const Tensor<T>& x, Channels ch = Channels::all(),
                            ForwardCache<T>* cache = nullptr) const {
    if (ch.fusion) ch.region = ch.edge = true;
    if (x.channels() != arch_.input_channels)
      throw ShapeError("network expects " + std::to_string(arch_.input_channels) + " input channels, got " +
                       x.shape_str());
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    c = ForwardCache<T>{};
    c.channels = ch;
    c.input = x;
    const int H = x.height(), W = x.width();
    std::vector<T> scratch;
    ForwardOutputs<T> out;

    // shared trunk
    const Tensor<T>* cur = &x;
    for (int s = 0; s < kSideOutputs; ++s) {
      auto& outs = c.stage_out[s];
      outs.reserve(trunk_[s].size());
      for (const Conv& conv : trunk_[s]) {
        outs.push_back(apply_conv(conv, *cur, scratch));
        cur = &outs.back();
      }
      // the deepest pooled map only feeds the region head
      if (s + 1 < kSideOutputs || ch.region) {
        c.pooled[s] = nn::maxpool_forward(*cur, c.pool_argmax[s]);
        cur = &c.pooled[s];
      }
    }

    if (ch.region) {
      if (c.pooled[4].height() < arch_.fc_kernel || c.pooled[4].width() < arch_.fc_kernel)
        throw ShapeError("input " + std::to_string(H) + "x" + std::to_string(W) +
                         " too small: deepest feature map is " + std::to_string(c.pooled[4].height()) + "x" +
                         std::to_string(c.pooled[4].width()) + ", head kernel needs " +
                         std::to_string(arch_.fc_kernel));
      c.fc6 = apply_conv(fc6_, c.pooled[4], scratch);
      c.fc7 = apply_conv(fc7_, c.fc6, scratch);
      c.score = apply_conv(score_, c.fc7, scratch);
      out.region_scores = nn::upsample_crop_forward(c.score, kernel_ptr(region_up_), region_up_.shape, H, W);
      out.region_probs = ProbabilityMap<T>(nn::softmax_channels(out.region_scores));
    }

    if (ch.edge) {
      const T* fuse = params_[fuse_w_].value.data();
      out.fused_edge_logit = Tensor<T>(1, H, W);
      for (int m = 0; m < kSideOutputs; ++m) {
        const Branch& b = branches_[m];
        const Tensor<T>& tap = c.stage_out[m].back();
        auto [lo, hy, hx] = branch_window(b, tap, H, W);
        c.win_y0[m] = c.win_x0[m] = lo;
        c.win_in[m] = nn::extract_window(tap, lo - 1, lo - 1, hy + 2, hx + 2);
        c.win_conv[m] = apply_conv(b.conv3, c.win_in[m], scratch);
        c.win_logit[m] = apply_conv(b.conv1, c.win_conv[m], scratch);
        nn::UpsampleShape us = b.up.shape;
        us.offset -= us.factor * lo;
        out.side_logits[m] = nn::upsample_crop_forward(c.win_logit[m], kernel_ptr(b.up), us, H, W);
        out.side_probs[m] = nn::sigmoid(out.side_logits[m]);
        if (cache) c.side_logits[m] = out.side_logits[m];
        T* fused = out.fused_edge_logit.data();
        const T* side = out.side_logits[m].data();
        for (std::size_t i = 0; i < out.fused_edge_logit.size(); ++i) fused[i] += fuse[m] * side[i];
      }
      out.fused_edge_prob = nn::sigmoid(out.fused_edge_logit);
    }

    if (ch.fusion) {
      out.fusion_logits = fusion_forward_logits(out.region_scores, out.fused_edge_logit, &c, scratch);
      out.fusion_probs = ProbabilityMap<T>(nn::softmax_channels(out.fusion_logits));
    }
    return out;
  }

  /// Fusion network alone: concatenated (O_r, O_e^(0)) to P_f.
  ProbabilityMap<T> fusion_forward(const Tensor<T>& region_scores, const Tensor<T>& fused_edge_logit) const {
    std::vector<T> scratch;
    return ProbabilityMap<T>(
        nn::softmax_channels(fusion_forward_logits(region_scores, fused_edge_logit, nullptr, scratch)));
  }

  /// Accumulates d(objective)/d(param) into `grads` for every group in `trainable`.
  /// Frozen groups receive no gradient and are not backpropagated through unless a
  /// trainable group lies upstream.
  void backward(const ForwardCache<T>& c, OutputGrads<T> g, nn::GroupSet trainable, nn::ParamSet<T>& grads) const {
    using nn::Group;
    const bool t_trunk = trainable.contains(Group::trunk), t_region = trainable.contains(Group::region),
               t_edge = trainable.contains(Group::edge), t_fusion = trainable.contains(Group::fusion);
    std::vector<T> scratch;
    const int K1 = num_outputs();

    // fusion network
    if (!g.fusion_logits.empty() && c.channels.fusion) {
      const bool need_input = t_trunk || t_region || t_edge;
      if (t_fusion || need_input) {
        Tensor<T> d;
        nn::upsample_crop_backward(c.fusion_fc[2], kernel_ptr(fusion_up_), fusion_up_.shape, g.fusion_logits, &d,
                                   grad_ptr(fusion_up_.kernel, t_fusion, grads));
        d = conv_backward(fusion_fcs_[2], c.fusion_fc[1], c.fusion_fc[2], d, t_fusion, true, grads, scratch);
        d = conv_backward(fusion_fcs_[1], c.fusion_fc[0], c.fusion_fc[1], d, t_fusion, true, grads, scratch);
        d = conv_backward(fusion_fcs_[0], c.fusion_pooled[1], c.fusion_fc[0], d, t_fusion, true, grads, scratch);
        Tensor<T> dc(c.fusion_conv[3].channels(), c.fusion_conv[3].height(), c.fusion_conv[3].width());
        nn::maxpool_backward_add(d, c.fusion_argmax[1], dc);
        d = conv_backward(fusion_convs_[3], c.fusion_conv[2], c.fusion_conv[3], dc, t_fusion, true, grads, scratch);
        d = conv_backward(fusion_convs_[2], c.fusion_pooled[0], c.fusion_conv[2], d, t_fusion, true, grads,
                          scratch);
        dc = Tensor<T>(c.fusion_conv[1].channels(), c.fusion_conv[1].height(), c.fusion_conv[1].width());
        nn::maxpool_backward_add(d, c.fusion_argmax[0], dc);
        d = conv_backward(fusion_convs_[1], c.fusion_conv[0], c.fusion_conv[1], dc, t_fusion, true, grads,
                          scratch);
        d = conv_backward(fusion_convs_[0], c.fusion_in, c.fusion_conv[0], d, t_fusion, need_input, grads,
                          scratch);
        if (need_input) {
          const int H = c.fusion_in.height(), W = c.fusion_in.width();
          Tensor<T> dr(K1, H, W), de(1, H, W);
          std::copy(d.data(), d.data() + dr.size(), dr.data());
          std::copy(d.data() + dr.size(), d.data() + d.size(), de.data());
          nn::add_inplace(g.region_scores, dr);
          nn::add_inplace(g.fused_edge_logit, de);
        }
      }
    }

    std::array<Tensor<T>, kSideOutputs> d_tap;
    Tensor<T> d_top;  // gradient w.r.t. pooled[4]

    // weighted fusion of the side logits
    if (!g.fused_edge_logit.empty() && c.channels.edge) {
      const auto& fuse = params_[fuse_w_].value;
      T* dfuse = t_edge ? grads[fuse_w_].value.data() : nullptr;
      const Tensor<T>& df = g.fused_edge_logit;
      for (int m = 0; m < kSideOutputs; ++m) {
        if (dfuse) {
          const Tensor<T>& side = c.side_logits[m];
          T acc = T(0);
          for (std::size_t i = 0; i < df.size(); ++i) acc += df.data()[i] * side.data()[i];
          dfuse[m] += acc;
        }
        if (t_edge || t_trunk) {
          Tensor<T> ds(1, df.height(), df.width());
          for (std::size_t i = 0; i < df.size(); ++i) ds.data()[i] = fuse[m] * df.data()[i];
          nn::add_inplace(g.side_logits[m], ds);
        }
      }
    }

    // region head
    if (!g.region_scores.empty() && c.channels.region && (t_region || t_trunk)) {
      Tensor<T> d;
      nn::upsample_crop_backward(c.score, kernel_ptr(region_up_), region_up_.shape, g.region_scores, &d,
                                 grad_ptr(region_up_.kernel, t_region, grads));
      d = conv_backward(score_, c.fc7, c.score, d, t_region, true, grads, scratch);
      d = conv_backward(fc7_, c.fc6, c.fc7, d, t_region, true, grads, scratch);
      d = conv_backward(fc6_, c.pooled[4], c.fc6, d, t_region, t_trunk, grads, scratch);
      if (t_trunk) d_top = std::move(d);
    }

    // edge side branches
    if (c.channels.edge && (t_edge || t_trunk)) {
      for (int m = 0; m < kSideOutputs; ++m) {
        if (g.side_logits[m].empty()) continue;
        const Branch& b = branches_[m];
        nn::UpsampleShape us = b.up.shape;
        us.offset -= us.factor * c.win_y0[m];
        Tensor<T> d;
        nn::upsample_crop_backward(c.win_logit[m], kernel_ptr(b.up), us, g.side_logits[m], &d,
                                   grad_ptr(b.up.kernel, t_edge, grads));
        d = conv_backward(b.conv1, c.win_conv[m], c.win_logit[m], d, t_edge, true, grads, scratch);
        d = conv_backward(b.conv3, c.win_in[m], c.win_conv[m], d, t_edge, t_trunk, grads, scratch);
        if (t_trunk) {
          const Tensor<T>& tap = c.stage_out[m].back();
          if (d_tap[m].empty()) d_tap[m] = Tensor<T>(tap.channels(), tap.height(), tap.width());
          nn::scatter_window_add(d, c.win_y0[m] - 1, c.win_x0[m] - 1, d_tap[m]);
        }
      }
    }

    // shared trunk
    if (!t_trunk) return;
    Tensor<T> d_pooled = std::move(d_top);
    for (int s = kSideOutputs - 1; s >= 0; --s) {
      const auto& outs = c.stage_out[s];
      Tensor<T> d = std::move(d_tap[s]);
      if (!d_pooled.empty()) {
        if (d.empty()) d = Tensor<T>(outs.back().channels(), outs.back().height(), outs.back().width());
        nn::maxpool_backward_add(d_pooled, c.pool_argmax[s], d);
      }
      d_pooled = Tensor<T>{};
      if (d.empty()) continue;
      for (int j = static_cast<int>(outs.size()) - 1; j >= 0; --j) {
        const Tensor<T>& in = j > 0 ? outs[j - 1] : (s > 0 ? c.pooled[s - 1] : c.input);
        const bool need_input = s > 0 || j > 0;
        d = conv_backward(trunk_[s][j], in, outs[j], d, true, need_input, grads, scratch);
      }
      d_pooled = std::move(d);
    }
  }

  /// Side logit m at input resolution, recomputed from the cache.
  Tensor<T> side_logit(const ForwardCache<T>& c, int m) const {
    const Branch& b = branches_[m];
    nn::UpsampleShape us = b.up.shape;
    us.offset -= us.factor * c.win_y0[m];
    return nn::upsample_crop_forward(c.win_logit[m], kernel_ptr(b.up), us, c.input.height(), c.input.width());
  }

 private:
  void build() {
    using nn::Group;
    using nn::ParamKind;
    CoordMap map;
    std::array<CoordMap, kSideOutputs> tap_map;
    int cin = arch_.input_channels;
    for (int s = 0; s < kSideOutputs; ++s) {
      for (int j = 0; j < arch_.convs_per_stage[s]; ++j) {
        const int pad = (s == 0 && j == 0) ? arch_.first_pad : 1;
        trunk_[s].push_back(make_conv("trunk.s" + std::to_string(s + 1) + ".c" + std::to_string(j + 1),
                                      Group::trunk, cin, arch_.trunk_widths[s], 3, pad, true));
        map = map.conv(3, pad);
        cin = arch_.trunk_widths[s];
      }
      tap_map[s] = map;
      map = map.pool();
    }

    fc6_ = make_conv("region.fc6", Group::region, cin, arch_.fc_width, arch_.fc_kernel, 0, true);
    fc7_ = make_conv("region.fc7", Group::region, arch_.fc_width, arch_.fc_width, 1, 0, true);
    score_ = make_conv("region.score", Group::region, arch_.fc_width, num_outputs(), 1, 0, false);
    map = map.conv(arch_.fc_kernel, 0);
    region_up_ = make_upsample("region.up", Group::region, num_outputs(), 32, map);

    for (int m = 0; m < kSideOutputs; ++m) {
      const std::string name = "edge.side" + std::to_string(m + 1);
      const int ch = arch_.trunk_widths[m];
      Branch b;
      b.conv3 = make_conv(name + ".conv3", Group::edge, ch, ch, 3, 0, true);  // pad supplied by the window margin
      b.conv1 = make_conv(name + ".conv1", Group::edge, ch, 1, 1, 0, false);
      b.up = make_upsample(name + ".up", Group::edge, 1, 1 << m, tap_map[m]);
      branches_[m] = b;
    }
    {
      nn::ParamTensor<T> p;
      p.name = "edge.fuse";
      p.group = Group::edge;
      p.kind = ParamKind::fuse_weight;
      p.shape = {kSideOutputs};
      fuse_w_ = params_.add(std::move(p));
    }

    CoordMap fmap;
    int fin = num_outputs() + 1;
    for (int i = 0; i < 4; ++i) {
      fusion_convs_[i] = make_conv("fusion.c" + std::to_string(i + 1), Group::fusion, fin, arch_.fusion_widths[i], 3,
                                   1, true);
      fin = arch_.fusion_widths[i];
      fmap = fmap.conv(3, 1);
      if (i == 1 || i == 3) fmap = fmap.pool();
    }
    fusion_fcs_[0] = make_conv("fusion.fc1", Group::fusion, fin, arch_.fusion_fc[0], 3, 1, true);
    fusion_fcs_[1] = make_conv("fusion.fc2", Group::fusion, arch_.fusion_fc[0], arch_.fusion_fc[1], 1, 0, true);
    fusion_fcs_[2] = make_conv("fusion.fc3", Group::fusion, arch_.fusion_fc[1], num_outputs(), 1, 0, false);
    fmap = fmap.conv(3, 1);
    fusion_up_ = make_upsample("fusion.up", Group::fusion, num_outputs(), 4, fmap);
  }

  Conv make_conv(const std::string& name, nn::Group g, int cin, int cout, int k, int pad, bool relu) {
    Conv c;
    c.shape = {cin, cout, k, pad};
    c.relu = relu;
    nn::ParamTensor<T> w;
    w.name = name + ".w";
    w.group = g;
    w.kind = nn::ParamKind::conv_weight;
    w.shape = {cout, cin, k, k};
    w.fan_in = c.shape.fan_in();
    w.fan_out = c.shape.fan_out();
    c.weight = params_.add(std::move(w));
    nn::ParamTensor<T> b;
    b.name = name + ".b";
    b.group = g;
    b.kind = nn::ParamKind::bias;
    b.shape = {cout};
    c.bias = params_.add(std::move(b));
    return c;
  }

  Upsample make_upsample(const std::string& name, nn::Group g, int channels, int factor, const CoordMap& map) {
    Upsample u;
    const int k = factor == 1 ? 1 : 2 * factor;
    u.shape = {channels, factor, k, map.crop_offset(factor, k)};
    if (factor > 1) {
      nn::ParamTensor<T> p;
      p.name = name + ".k";
      p.group = g;
      p.kind = nn::ParamKind::upsample;
      p.shape = {channels, k, k};
      u.kernel = params_.add(std::move(p));
    }
    return u;
  }

  /// First needed tap row/col and the window extent for a side branch.
  std::tuple<int, int, int> branch_window(const Branch& b, const Tensor<T>& tap, int H, int W) const {
    const auto& s = b.up.shape;
    const int f = s.factor, k = s.kernel;
    const int lo = std::max(0, (s.offset - k + f) / f);
    const int hi_y = std::min(tap.height() - 1, (s.offset + H - 1) / f);
    const int hi_x = std::min(tap.width() - 1, (s.offset + W - 1) / f);
    if (hi_y < lo || hi_x < lo)
      throw ShapeError("input " + std::to_string(H) + "x" + std::to_string(W) + " too small for side output");
    return {lo, hi_y - lo + 1, hi_x - lo + 1};
  }

  const T* kernel_ptr(const Upsample& u) const { return u.kernel < 0 ? nullptr : params_[u.kernel].value.data(); }

  static T* grad_ptr(int idx, bool trainable, nn::ParamSet<T>& grads) {
    return (idx < 0 || !trainable) ? nullptr : grads[idx].value.data();
  }

  Tensor<T> apply_conv(const Conv& conv, const Tensor<T>& in, std::vector<T>& scratch) const {
    Tensor<T> out = nn::conv2d_forward(in, params_[conv.weight].value.data(), params_[conv.bias].value.data(),
                                       conv.shape, scratch);
    if (conv.relu) nn::relu_inplace(out);
    return out;
  }

  /// Backward through activation and convolution; returns d(input) or an empty tensor.
  Tensor<T> conv_backward(const Conv& conv, const Tensor<T>& in, const Tensor<T>& out, Tensor<T> dout,
                          bool param_grads, bool need_input, nn::ParamSet<T>& grads, std::vector<T>& scratch) const {
    if (conv.relu) nn::relu_backward_inplace(out, dout);
    Tensor<T> din;
    nn::conv2d_backward(in, params_[conv.weight].value.data(), conv.shape, dout, need_input ? &din : nullptr,
                        param_grads ? grads[conv.weight].value.data() : nullptr,
                        param_grads ? grads[conv.bias].value.data() : nullptr, scratch);
    return din;
  }

  Tensor<T> fusion_forward_logits(const Tensor<T>& region_scores, const Tensor<T>& fused_edge_logit,
                                  ForwardCache<T>* c, std::vector<T>& scratch) const {
    if (!region_scores.same_spatial(fused_edge_logit))
      throw ShapeError("fusion inputs differ in size: " + region_scores.shape_str() + " vs " +
                       fused_edge_logit.shape_str());
    if (region_scores.channels() != num_outputs() || fused_edge_logit.channels() != 1)
      throw ShapeError("fusion expects K+1 region channels and one edge channel");
    ForwardCache<T> local;
    ForwardCache<T>& fc = c ? *c : local;
    fc.fusion_in = nn::concat_channels(region_scores, fused_edge_logit);
    fc.fusion_conv[0] = apply_conv(fusion_convs_[0], fc.fusion_in, scratch);
    fc.fusion_conv[1] = apply_conv(fusion_convs_[1], fc.fusion_conv[0], scratch);
    fc.fusion_pooled[0] = nn::maxpool_forward(fc.fusion_conv[1], fc.fusion_argmax[0]);
    fc.fusion_conv[2] = apply_conv(fusion_convs_[2], fc.fusion_pooled[0], scratch);
    fc.fusion_conv[3] = apply_conv(fusion_convs_[3], fc.fusion_conv[2], scratch);
    fc.fusion_pooled[1] = nn::maxpool_forward(fc.fusion_conv[3], fc.fusion_argmax[1]);
    fc.fusion_fc[0] = apply_conv(fusion_fcs_[0], fc.fusion_pooled[1], scratch);
    fc.fusion_fc[1] = apply_conv(fusion_fcs_[1], fc.fusion_fc[0], scratch);
    fc.fusion_fc[2] = apply_conv(fusion_fcs_[2], fc.fusion_fc[1], scratch);
    return nn::upsample_crop_forward(fc.fusion_fc[2], kernel_ptr(fusion_up_), fusion_up_.shape,
                                     region_scores.height(), region_scores.width());
  }

  ArchConfig arch_;
  nn::ParamSet<T> params_;
  std::array<std::vector<Conv>, kSideOutputs> trunk_;
  Conv fc6_, fc7_, score_;
  Upsample region_up_;
  std::array<Branch, kSideOutputs> branches_;
  int fuse_w_ = -1;
  std::array<Conv, 4> fusion_convs_;
  std::array<Conv, 3> fusion_fcs_;
  Upsample fusion_up_;
};

}  // namespace dmcs
