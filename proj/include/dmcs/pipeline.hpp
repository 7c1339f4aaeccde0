#pragma once

// Inference: network outputs to instance maps, for the full model and for the
// region channel alone, plus scoring over a set of samples.

#include <string>
#include <vector>

#include "dmcs/metrics.hpp"
#include "dmcs/model.hpp"
#include "dmcs/postprocess.hpp"
#include "dmcs/trainer.hpp"

namespace dmcs {

template <typename T>
struct Prediction {
  ForwardOutputs<T> outputs;
  InstanceMap instances;
};

/// Fused probabilities with edge suppression from the fused edge map.
template <typename T>
Prediction<T> predict_instances(const DmcsNet<T>& net, const Tensor<T>& x, const PostprocessConfig& cfg) {
  Prediction<T> p;
  p.outputs = net.forward(x, Channels::all());
  p.instances = extract_instances(p.outputs.fusion_probs, &p.outputs.fused_edge_prob, cfg);
  return p;
}

/// Region channel only, thresholded and split into connected components; no edge evidence.
template <typename T>
Prediction<T> predict_region_baseline(const DmcsNet<T>& net, const Tensor<T>& x, PostprocessConfig cfg) {
  cfg.edge_suppression = false;
  cfg.dilation_radius = 0;
  Prediction<T> p;
  p.outputs = net.forward(x, Channels::region_only());
  p.instances = extract_instances(p.outputs.region_probs, static_cast<const Tensor<T>*>(nullptr), cfg);
  return p;
}

enum class Predictor { dmcs, region_baseline };

template <typename T>
SplitScore evaluate_samples(const DmcsNet<T>& net, const std::vector<NetSample<T>>& data,
                            const std::vector<InstanceMap>& truth, const PostprocessConfig& cfg,
                            Predictor which = Predictor::dmcs) {
  if (data.size() != truth.size()) throw UsageError("evaluate_samples: data and ground truth differ in count");
  std::vector<ImageScore> scores;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = which == Predictor::dmcs ? predict_instances(net, data[i].x, cfg)
                                            : predict_region_baseline(net, data[i].x, cfg);
    scores.push_back(score_image(data[i].id, truth[i], &p.instances));
  }
  return aggregate(std::move(scores));
}

}  // namespace dmcs
