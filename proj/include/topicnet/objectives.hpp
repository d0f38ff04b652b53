#pragma once

// Contrastive objective over gated, pooled group features, the saliency loss, and their
// weighted sum.

#include <cstdint>
#include <map>
#include <vector>

#include "topicnet/autograd.hpp"

namespace topicnet::objectives {

inline constexpr double kTemperature = 0.07;
inline constexpr double kNormFloor = 1e-12;
inline constexpr int kAnchorLayer = 5;

// Number of exp(cos / tau) evaluations performed on this thread.
std::uint64_t psi_evaluations();
void reset_psi_evaluations();

// Gate-then-global-average-pool over (N, H, W): [N,D,H,W] x [D] -> [D].
Var pooled_feature(const Var& x, const Var& gate);

// Cosine similarity with both norms floored at 1e-12.
Var cosine(const Var& a, const Var& b);

// exp(cos(a, b) / tau) as a scalar.
Var psi(const Var& anchor, const Var& other, double tau);

// Projected features x~^i and gates e^i of one group, keyed by layer.
struct GroupLayerFeatures {
  std::map<int, Var> projected;
  std::map<int, Var> gate;

  Var pooled(int layer) const;
};

struct ContrastiveOptions {
  // Layers taking part in the positive term; must include the anchor layer 5.
  std::vector<int> positive_layers{3, 4, 5};
  // Layers at which mismatched and fused attention negatives are formed.
  std::vector<int> negative_layers{3, 4, 5};
  double tau = kTemperature;
};

// Route count rule: three negative routes for two groups, two otherwise.
std::size_t route_count(std::size_t groups);

struct ContrastiveBatch {
  std::size_t groups = 0;
  std::size_t routes = 0;
  double tau = kTemperature;
  std::vector<Var> anchors;                  // F(z) of each group (layer 5)
  std::vector<std::vector<Var>> positives;   // F(z+) per group
  std::vector<std::vector<Var>> intergroup;  // route 1, per group
  std::vector<Var> mismatched;               // route 2, shared by all anchors
  std::vector<Var> fused;                    // route 3, empty unless routes == 3

  // Route sets seen by the anchor of group m, indexed by route - 1.
  std::vector<std::vector<Var>> route_sets(std::size_t m) const;
  std::size_t negative_count(std::size_t m) const;
};

// Route 1: the other groups' anchors.
std::vector<Var> negatives_intergroup(const std::vector<Var>& anchors, std::size_t m);
// Route 2: pooled(x_j, e_k) for all ordered pairs j != k at one layer.
std::vector<Var> negatives_mismatched_attention(const std::vector<GroupLayerFeatures>& groups, int layer);
// Route 3: pooled(x_j, e_j + e_k) for all ordered pairs j != k at one layer.
std::vector<Var> negatives_fused_attention(const std::vector<GroupLayerFeatures>& groups, int layer);

ContrastiveBatch assemble_contrastive_batch(const std::vector<GroupLayerFeatures>& groups,
                                            const ContrastiveOptions& options);

// Sum over positives of psi(anchor, positive). With no positive layer besides the anchor, the
// anchor serves as its own positive.
Var psi_positive(const Var& anchor, const std::vector<Var>& positives, double tau);

// Sum of psi over the first `routes` route sets.
Var psi_negative_total(const Var& anchor, const std::vector<std::vector<Var>>& route_sets, double tau,
                       std::size_t routes);

// -log(psi_pos / (psi_pos + psi_neg)).
Var contrastive_loss(const Var& psi_pos, const Var& psi_neg);

// Mean of the per-anchor contrastive loss over all groups in the batch.
Var contrastive_loss(const ContrastiveBatch& batch);

struct SaliencyLoss {
  Var value;
  bool degenerate = false;
};

// Mean over images of 1 - sum(M T) / sum(M + T); the optional factor two gives the Dice form.
// maps: [N,1,H,W] (or any [N,...]); masks: binary, same shape.
SaliencyLoss saliency_loss(const Var& maps, const Tensor& masks, bool dice_factor_two = false);

struct LossWeights {
  double contrastive = 1.0;
  double saliency = 1.0;
};

Var total_loss(const Var& l_cl, const Var& l_s, const LossWeights& weights);

struct LossReport {
  double l_cl = 0.0;
  double l_s = 0.0;
  double l = 0.0;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
};

}  // namespace topicnet::objectives
