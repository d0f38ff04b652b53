#pragma once

// Image-to-group propagation: grouped non-local attention across the N images of a group.
//
// Token order everywhere is (image, pixel) row-major: token t = n * S*S + p.

#include <string>

#include "topicnet/autograd.hpp"
#include "topicnet/params.hpp"
#include "topicnet/rng.hpp"

namespace topicnet::igp {

enum class ResizeMode { kBilinear, kArea };

struct Options {
  std::size_t working_res = 7;
  ResizeMode resize = ResizeMode::kBilinear;
  // Default applies the row softmax after averaging over pixels; true swaps the order.
  bool softmax_before_mean = false;
};

struct Weights {
  Var g_w, g_b, theta_w, theta_b, phi_w, phi_b;
};

struct AffinityStack {
  Var a_g;          // [N*S*S, N*S*S]
  Var a_theta_phi;  // [N*S*S, N*S*S]
  std::size_t images = 0;
  std::size_t res = 0;
};

void add_params(ParameterSet& params, const std::string& prefix, std::size_t dim, Rng& rng);
Weights bind(const BoundParameters& params, const std::string& prefix);

// [N,D,H,W] -> [N,D,S,S]. Requires S >= 2.
Var to_working_resolution(const Var& x, std::size_t res, ResizeMode mode = ResizeMode::kBilinear);

// Flattens a [N,C,S,S] map into [N*S*S, C] tokens.
Var to_tokens(const Var& x);

// g, theta, phi are 1x1 convs D -> D/2; A_g = G G^T and A_theta_phi = Theta Phi^T.
AffinityStack build_pairwise_affinities(const Var& x, const Weights& w);

// [N*P, N*P] with entry (n1*P + p, n2*P + q) -> [P, P, N] holding max over n2 at [p, q, n1].
Var reduce_over_partner_images(const Var& affinity, std::size_t images);

// A[p, n1, n2] = sum_q A_g[p, n1, q] * softmax_q(A_tp)[p, q, n2]. Output [P, N, N].
Var compose_inter_image_similarity(const Var& a_g_reduced, const Var& a_tp_reduced);

// Row-stochastic [N, N] mixing weights derived from the composed similarity.
Var inter_image_weights(const Var& similarity, bool softmax_before_mean = false);

// r_n = sum_n' W[n, n'] x_n'. x is at working resolution.
Var group_semantics_mix(const Var& similarity, const Var& x, bool softmax_before_mean = false);

// Full block on a working-resolution map.
Var propagate(const Var& x, const Weights& w, const Options& opt);

}  // namespace topicnet::igp
