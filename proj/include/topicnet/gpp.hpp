#pragma once

// Group-to-pixel propagation: pixel self-attention over all pixels of a group, distillation
// of a per-group channel gate e, and recalibration z = x * e.

#include <string>

#include "topicnet/autograd.hpp"
#include "topicnet/params.hpp"
#include "topicnet/rng.hpp"

namespace topicnet::gpp {

struct AttentionWeights {
  Var q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
};

struct GateWeights {
  Var w;  // [D, D]
  Var b;  // [D]
};

void add_attention_params(ParameterSet& params, const std::string& prefix, std::size_t dim, Rng& rng);
void add_gate_params(ParameterSet& params, const std::string& prefix, std::size_t dim, Rng& rng);
AttentionWeights bind_attention(const BoundParameters& params, const std::string& prefix);
GateWeights bind_gate(const BoundParameters& params, const std::string& prefix);

// softmax(Q K^T / sqrt(D/2)) over all N*S*S group tokens: [T, T].
Var attention_matrix(const Var& r, const AttentionWeights& w);

// r + O(attention * V), same shape as r.
Var pixel_self_attention(const Var& r, const AttentionWeights& w);

// Global average pool over (N, S, S), then sigmoid(W g + b): [D] with entries in (0, 1).
Var distill_channel_gate(const Var& attended, const GateWeights& w);

// Channel-wise broadcast multiply of [N,D,H,W] by e: [D].
Var recalibrate(const Var& x, const Var& gate);

}  // namespace topicnet::gpp
