#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <vector>

#include "topicnet/autograd.hpp"
#include "topicnet/params.hpp"
#include "topicnet/rng.hpp"

namespace topicnet {

struct BackboneConfig {
  std::array<std::size_t, 5> channels{16, 32, 64, 64, 64};
  std::size_t lateral_dim = 64;
  std::size_t in_channels = 3;
};

// Encoder stage outputs x^1..x^5 and lateral projections x~^i (channel dim D) for the
// requested layers. H_i = H_in / 2^(i-1).
struct LayerFeatures {
  std::array<Var, 5> stages;
  std::map<int, Var> lateral;

  const Var& stage(int layer) const { return stages.at(static_cast<std::size_t>(layer - 1)); }
  const Var& projected(int layer) const;
};

// Uniform(-b, b), b = min(1, gain / sqrt(fan_in)).
Tensor fan_in_uniform(const Shape& shape, std::size_t fan_in, double gain, Rng& rng);
inline constexpr double kReluGain = 2.449489742783178;    // sqrt(6)
inline constexpr double kLinearGain = 1.7320508075688772;  // sqrt(3)

void add_backbone_params(ParameterSet& params, const BackboneConfig& cfg,
                         const std::vector<int>& lateral_layers, Rng& rng);
ParameterSet init_backbone_params(const BackboneConfig& cfg, const std::vector<int>& lateral_layers,
                                  std::uint64_t seed);

// images: [N, 3, H, W] with H, W multiples of 16.
LayerFeatures encode(const Var& images, const BoundParameters& params, const BackboneConfig& cfg,
                     const std::vector<int>& lateral_layers);

// Top-down merge of the recalibrated features followed by two skip-fusing upsampling stages
// and a sigmoid head. Returns [N, 1, H_in, W_in].
Var decode(const Var& z3, const Var& z4, const Var& z5, const Var& x2, const Var& x1,
           const BoundParameters& params);

}  // namespace topicnet
