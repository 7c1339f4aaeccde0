#pragma once

// Loss terms of the three channels and their gradients with respect to the
// network logits. Probabilities are clamped to [eps, 1] inside every log.

#include <array>
#include <cmath>
#include <string>

#include "dmcs/core.hpp"
#include "dmcs/model.hpp"

namespace dmcs {

inline constexpr double kLogClamp = 1e-12;

enum class LossNorm { sum, mean };

inline LossNorm parse_loss_norm(const std::string& s) {
  if (s == "sum") return LossNorm::sum;
  if (s == "mean") return LossNorm::mean;
  throw UsageError("loss normalization must be 'sum' or 'mean', got '" + s + "'");
}

inline double clamped_log(double p) { return std::log(std::max(p, kLogClamp)); }

/// Sum over pixels of -log P(y_j). Serves both the region and the fusion channel.
template <typename T>
double log_loss(const ProbabilityMap<T>& probs, const LabelMap& labels) {
  if (probs.height() != labels.height || probs.width() != labels.width)
    throw ShapeError("log loss: prediction " + probs.tensor().shape_str() + " vs labels " +
                     std::to_string(labels.height) + "x" + std::to_string(labels.width));
  if (labels.num_classes + 1 > probs.channels()) throw ShapeError("log loss: too few probability channels");
  const auto& p = probs.tensor();
  double loss = 0;
  for (std::size_t i = 0; i < p.plane(); ++i) loss -= clamped_log(p.channel(labels.values[i])[i]);
  return loss;
}

template <typename T>
double region_loss(const ProbabilityMap<T>& region_probs, const LabelMap& labels) {
  return log_loss(region_probs, labels);
}

template <typename T>
double fusion_loss(const ProbabilityMap<T>& fusion_probs, const LabelMap& labels) {
  return log_loss(fusion_probs, labels);
}

/// d(scale * log_loss)/d(logits) through the softmax. Zero where the clamp is active.
template <typename T>
Tensor<T> log_loss_grad(const ProbabilityMap<T>& probs, const LabelMap& labels, double scale) {
  const auto& p = probs.tensor();
  Tensor<T> g(p.channels(), p.height(), p.width());
  for (std::size_t i = 0; i < p.plane(); ++i) {
    const int y = labels.values[i];
    if (p.channel(y)[i] < kLogClamp) continue;
    for (int c = 0; c < p.channels(); ++c)
      g.channel(c)[i] = static_cast<T>(scale * (p.channel(c)[i] - (c == y ? 1.0 : 0.0)));
  }
  return g;
}

/// Binary cross entropy summed over pixels: -[z log p + (1 - z) log(1 - p)].
template <typename T>
double bce_loss(const Tensor<T>& probs, const EdgeMap& edges) {
  if (probs.height() != edges.height || probs.width() != edges.width || probs.channels() != 1)
    throw ShapeError("edge loss: prediction " + probs.shape_str() + " vs edge map " +
                     std::to_string(edges.height) + "x" + std::to_string(edges.width));
  double loss = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs.data()[i];
    loss -= edges.values[i] ? clamped_log(p) : clamped_log(1.0 - p);
  }
  return loss;
}

/// d(scale * bce)/d(logit) through the sigmoid.
template <typename T>
Tensor<T> bce_grad(const Tensor<T>& probs, const EdgeMap& edges, double scale) {
  Tensor<T> g(1, probs.height(), probs.width());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs.data()[i];
    double d = 0;
    if (edges.values[i]) {
      if (p >= kLogClamp) d = p - 1.0;
    } else {
      if (1.0 - p >= kLogClamp) d = p;
    }
    g.data()[i] = static_cast<T>(scale * d);
  }
  return g;
}

struct EdgeLoss {
  std::array<double, kSideOutputs> side{};
  double fused = 0;
  double total = 0;  // sum of the side terms plus the fused term
};

template <typename T>
EdgeLoss edge_loss(const ForwardOutputs<T>& out, const EdgeMap& edges) {
  EdgeLoss l;
  for (int m = 0; m < kSideOutputs; ++m) {
    l.side[m] = bce_loss(out.side_probs[m], edges);
    l.total += l.side[m];
  }
  l.fused = bce_loss(out.fused_edge_prob, edges);
  l.total += l.fused;
  return l;
}

inline double total_finetune_loss(double fusion, double edge_total, double lambda_e) {
  if (lambda_e < 0) throw UsageError("edge loss weight must be non-negative");
  return fusion + lambda_e * edge_total;
}

/// The training objective of each stage.
enum class Objective { region, edge, fusion, finetune };

inline const char* objective_name(Objective o) {
  switch (o) {
    case Objective::region: return "region";
    case Objective::edge: return "edge";
    case Objective::fusion: return "fusion";
    case Objective::finetune: return "finetune";
  }
  return "?";
}

struct ObjectiveSpec {
  Objective kind = Objective::finetune;
  double lambda_e = 1e-6;
  LossNorm norm = LossNorm::sum;
  double grad_scale = 1.0;  // extra factor on the gradient (mini-batch averaging)
  int edge_term = -1;       // edge objective only: -1 all terms, 0..4 one side output, 5 the fused map
};

inline constexpr int kFusedEdgeTerm = kSideOutputs;

struct LossBreakdown {
  double region = 0;
  EdgeLoss edge;
  double fusion = 0;
  double total = 0;  // the optimized objective
};

inline Channels channels_for(Objective o) {
  switch (o) {
    case Objective::region: return Channels::region_only();
    case Objective::edge: return Channels::edge_only();
    default: return Channels::all();
  }
}

/// Evaluates the objective on one sample; when `grads` is given, accumulates
/// grad_scale * d(total)/d(params) for the trainable groups.
template <typename T>
LossBreakdown evaluate_objective(const DmcsNet<T>& net, const Tensor<T>& x, const LabelMap& labels,
                                 const EdgeMap& edges, const ObjectiveSpec& spec, nn::GroupSet trainable = {},
                                 nn::ParamSet<T>* grads = nullptr, ForwardCache<T>* keep_cache = nullptr) {
  ForwardCache<T> local;
  ForwardCache<T>& cache = keep_cache ? *keep_cache : local;
  const auto out = net.forward(x, channels_for(spec.kind), (grads || keep_cache) ? &cache : nullptr);
  const double norm = spec.norm == LossNorm::mean ? 1.0 / static_cast<double>(x.plane()) : 1.0;
  LossBreakdown l;
  OutputGrads<T> g;
  const double gs = spec.grad_scale * norm;
  switch (spec.kind) {
    case Objective::region:
      l.region = region_loss(out.region_probs, labels) * norm;
      l.total = l.region;
      if (grads) g.region_scores = log_loss_grad(out.region_probs, labels, gs);
      break;
    case Objective::edge:
    case Objective::finetune: {
      const double we = spec.kind == Objective::edge ? 1.0 : spec.lambda_e;
      l.edge = edge_loss(out, edges);
      for (auto& v : l.edge.side) v *= norm;
      l.edge.fused *= norm;
      l.edge.total *= norm;
      const int term = spec.kind == Objective::edge ? spec.edge_term : -1;
      if (spec.kind == Objective::finetune) {
        l.fusion = fusion_loss(out.fusion_probs, labels) * norm;
        l.total = total_finetune_loss(l.fusion, l.edge.total, spec.lambda_e);
      } else if (term < 0) {
        l.total = l.edge.total;
      } else {
        l.total = term == kFusedEdgeTerm ? l.edge.fused : l.edge.side[term];
      }
      if (grads) {
        if (we != 0) {
          for (int m = 0; m < kSideOutputs; ++m)
            if (term < 0 || term == m) g.side_logits[m] = bce_grad(out.side_probs[m], edges, gs * we);
          if (term < 0 || term == kFusedEdgeTerm)
            g.fused_edge_logit = bce_grad(out.fused_edge_prob, edges, gs * we);
        }
        if (spec.kind == Objective::finetune) g.fusion_logits = log_loss_grad(out.fusion_probs, labels, gs);
      }
      break;
    }
    case Objective::fusion:
      l.fusion = fusion_loss(out.fusion_probs, labels) * norm;
      l.total = l.fusion;
      if (grads) g.fusion_logits = log_loss_grad(out.fusion_probs, labels, gs);
      break;
  }
  if (!std::isfinite(l.total)) throw NumericError("non-finite loss in " + std::string(objective_name(spec.kind)));
  if (grads) net.backward(cache, std::move(g), trainable, *grads);
  return l;
}

}  // namespace dmcs
