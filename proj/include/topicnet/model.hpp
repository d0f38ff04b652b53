#pragma once

// Full co-saliency network: shared encoder, per-layer IGP -> GPP -> gate, recalibration and
// decoding, plus the training objectives.

#include <cstdint>
#include <vector>

#include "topicnet/backbone.hpp"
#include "topicnet/config.hpp"
#include "topicnet/igp.hpp"
#include "topicnet/objectives.hpp"
#include "topicnet/params.hpp"

namespace topicnet {

enum class Mode { kTrain, kInfer };

struct GroupInput {
  Tensor images;  // [N, 3, H, W], normalised
  Tensor masks;   // [N, 1, H, W]; may be empty in inference
};

struct ForwardOutput {
  std::vector<Var> maps;  // per group, [N, 1, H, W]
  // Set in training mode only.
  Var loss, loss_cl, loss_s;
  objectives::LossReport report;
  bool degenerate = false;
  std::size_t routes = 0;
  std::size_t negatives = 0;  // negative terms seen by the first anchor
};

BackboneConfig backbone_config(const TrainConfig& cfg);
igp::Options igp_options(const TrainConfig& cfg);

// Parameters for every layer the training configuration touches.
ParameterSet init_model(const TrainConfig& cfg, std::uint64_t seed);

// Training mode needs masks for every group and, with the contrastive module on, M >= 2.
// Inference performs no contrastive computation at all.
ForwardOutput forward_topicnet(Tape& tape, const BoundParameters& params, const std::vector<GroupInput>& groups,
                               const TrainConfig& cfg, Mode mode);

}  // namespace topicnet
