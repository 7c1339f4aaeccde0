#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <utility>
#include <vector>

#include "dmcs/losses.hpp"

namespace dmcs {

struct GradCheckResult {
  std::map<nn::Group, double> max_rel_error;  // per checked group
  std::map<nn::Group, int> sampled;
  std::map<nn::Group, int> skipped_kinks;
  double worst = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps parameters whose gradient is
/// numerically zero from dividing round-off by round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Fingerprint of every piecewise-linear decision in a forward pass: ReLU
/// on/off states and max-pool winners. Two evaluations with equal fingerprints
/// lie on the same smooth piece of the objective.
template <typename T>
std::uint64_t activation_signature(const ForwardCache<T>& c) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  auto tensor = [&](const Tensor<T>& t) {
    for (const T& v : t.values()) mix(v > T(0) ? 1u : 0u);
  };
  auto argmax = [&](const std::vector<int>& a) {
    for (int v : a) mix(static_cast<std::uint64_t>(v));
  };
  for (int s = 0; s < kSideOutputs; ++s) {
    for (const auto& t : c.stage_out[s]) tensor(t);
    argmax(c.pool_argmax[s]);
    tensor(c.win_conv[s]);
  }
  tensor(c.fc6);
  tensor(c.fc7);
  for (const auto& t : c.fusion_conv) tensor(t);
  for (const auto& a : c.fusion_argmax) argmax(a);
  tensor(c.fusion_fc[0]);
  tensor(c.fusion_fc[1]);
  return h;
}

/// Compares analytic gradients against central finite differences on
/// `samples_per_group` random parameters of every group in `groups`. A sample
/// whose +/- eps evaluations fall on different pieces of the piecewise-linear
/// network (a ReLU or max-pool decision flips) is not differentiable at that
/// step size; it is skipped and another parameter is drawn.
template <typename T>
GradCheckResult gradient_check(DmcsNet<T>& net, const Tensor<T>& x, const LabelMap& labels, const EdgeMap& edges,
                               const ObjectiveSpec& spec, nn::GroupSet groups, int samples_per_group = 50,
                               double eps = 1e-4, std::uint64_t seed = 7) {
  auto grads = net.params().zeros_like();
  ForwardCache<T> cache;
  const double base_loss = evaluate_objective(net, x, labels, edges, spec, groups, &grads, &cache).total;
  if (!std::isfinite(base_loss)) throw NumericError("gradient check: non-finite loss");
  const std::uint64_t base_sig = activation_signature(cache);
  std::mt19937_64 rng(seed);
  GradCheckResult res;
  for (nn::Group g : nn::kAllGroups) {
    if (!groups.contains(g)) continue;
    std::vector<std::pair<int, std::size_t>> slots;
    for (std::size_t t = 0; t < net.params().size(); ++t)
      if (net.params()[t].group == g)
        for (std::size_t j = 0; j < net.params()[t].value.size(); ++j) slots.emplace_back(static_cast<int>(t), j);
    std::shuffle(slots.begin(), slots.end(), rng);
    double worst = 0;
    int taken = 0, skipped = 0;
    for (auto [t, j] : slots) {
      if (taken >= samples_per_group) break;
      T& v = net.params()[t].value[j];
      const T saved = v;
      v = saved + static_cast<T>(eps);
      const double up = evaluate_objective(net, x, labels, edges, spec, {}, static_cast<nn::ParamSet<T>*>(nullptr), &cache).total;
      const bool smooth_up = activation_signature(cache) == base_sig;
      v = saved - static_cast<T>(eps);
      const double down = evaluate_objective(net, x, labels, edges, spec, {}, static_cast<nn::ParamSet<T>*>(nullptr), &cache).total;
      const bool smooth_down = activation_signature(cache) == base_sig;
      v = saved;
      if (!smooth_up || !smooth_down) {
        ++skipped;
        continue;
      }
      const double numeric = (up - down) / (2 * eps);
      worst = std::max(worst, relative_error(grads[t].value[j], numeric));
      ++taken;
    }
    res.max_rel_error[g] = worst;
    res.sampled[g] = taken;
    res.skipped_kinks[g] = skipped;
    res.worst = std::max(res.worst, worst);
  }
  return res;
}

}  // namespace dmcs
