#include "topicnet/objectives.hpp"

#include <algorithm>

#include "topicnet/gpp.hpp"

namespace topicnet::objectives {

namespace {

thread_local std::uint64_t g_psi_evaluations = 0;

Var norm(const Var& v) { return clamp_min(sqrt(clamp_min(sum_all(mul(v, v)), kNormFloor * kNormFloor)), kNormFloor); }

bool has_layer(const std::vector<int>& layers, int layer) {
  return std::find(layers.begin(), layers.end(), layer) != layers.end();
}

}  // namespace

std::uint64_t psi_evaluations() { return g_psi_evaluations; }
void reset_psi_evaluations() { g_psi_evaluations = 0; }

Var pooled_feature(const Var& x, const Var& gate) {
  const Shape& s = x.shape();
  Var z = gpp::recalibrate(x, gate);
  return reduce_mean(reshape(permute(z, {1, 0, 2, 3}), Shape{s[1], s[0] * s[2] * s[3]}), 1);
}

Var cosine(const Var& a, const Var& b) {
  if (a.shape() != b.shape() || a.shape().size() != 1)
    throw ShapeError("cosine expects two vectors of equal length, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  return div(sum_all(mul(a, b)), mul(norm(a), norm(b)));
}

Var psi(const Var& anchor, const Var& other, double tau) {
  ++g_psi_evaluations;
  return exp(mul(cosine(anchor, other), 1.0 / tau));
}

Var GroupLayerFeatures::pooled(int layer) const {
  return pooled_feature(projected.at(layer), gate.at(layer));
}

std::size_t route_count(std::size_t groups) { return groups == 2 ? 3 : 2; }

std::vector<std::vector<Var>> ContrastiveBatch::route_sets(std::size_t m) const {
  std::vector<std::vector<Var>> sets{intergroup.at(m), mismatched};
  if (routes == 3) sets.push_back(fused);
  return sets;
}

std::size_t ContrastiveBatch::negative_count(std::size_t m) const {
  std::size_t n = 0;
  for (const auto& s : route_sets(m)) n += s.size();
  return n;
}

std::vector<Var> negatives_intergroup(const std::vector<Var>& anchors, std::size_t m) {
  if (anchors.size() < 2) throw ConfigError("contrastive module requires at least 2 groups");
  std::vector<Var> out;
  for (std::size_t l = 0; l < anchors.size(); ++l)
    if (l != m) out.push_back(anchors[l]);
  return out;
}

std::vector<Var> negatives_mismatched_attention(const std::vector<GroupLayerFeatures>& groups, int layer) {
  if (groups.size() < 2) throw ConfigError("contrastive module requires at least 2 groups");
  std::vector<Var> out;
  for (std::size_t j = 0; j < groups.size(); ++j)
    for (std::size_t k = 0; k < groups.size(); ++k)
      if (j != k) out.push_back(pooled_feature(groups[j].projected.at(layer), groups[k].gate.at(layer)));
  return out;
}

std::vector<Var> negatives_fused_attention(const std::vector<GroupLayerFeatures>& groups, int layer) {
  if (groups.size() < 2) throw ConfigError("contrastive module requires at least 2 groups");
  std::vector<Var> out;
  for (std::size_t j = 0; j < groups.size(); ++j)
    for (std::size_t k = 0; k < groups.size(); ++k)
      if (j != k) {
        Var fused_gate = add(groups[j].gate.at(layer), groups[k].gate.at(layer));
        out.push_back(pooled_feature(groups[j].projected.at(layer), fused_gate));
      }
  return out;
}

ContrastiveBatch assemble_contrastive_batch(const std::vector<GroupLayerFeatures>& groups,
                                            const ContrastiveOptions& options) {
  if (groups.size() < 2) throw ConfigError("contrastive module requires at least 2 groups");
  if (!has_layer(options.positive_layers, kAnchorLayer))
    throw ConfigError("positive layers must include the anchor layer 5");
  ContrastiveBatch b;
  b.groups = groups.size();
  b.routes = route_count(b.groups);
  b.tau = options.tau;
  for (const auto& g : groups) {
    b.anchors.push_back(g.pooled(kAnchorLayer));
    std::vector<Var> pos;
    for (int layer : options.positive_layers)
      if (layer != kAnchorLayer) pos.push_back(g.pooled(layer));
    b.positives.push_back(std::move(pos));
  }
  for (std::size_t m = 0; m < b.groups; ++m) b.intergroup.push_back(negatives_intergroup(b.anchors, m));
  for (int layer : options.negative_layers) {
    auto r2 = negatives_mismatched_attention(groups, layer);
    b.mismatched.insert(b.mismatched.end(), r2.begin(), r2.end());
    if (b.routes == 3) {
      auto r3 = negatives_fused_attention(groups, layer);
      b.fused.insert(b.fused.end(), r3.begin(), r3.end());
    }
  }
  return b;
}

Var psi_positive(const Var& anchor, const std::vector<Var>& positives, double tau) {
  if (positives.empty()) return psi(anchor, anchor, tau);
  Var total = psi(anchor, positives.front(), tau);
  for (std::size_t i = 1; i < positives.size(); ++i) total = add(total, psi(anchor, positives[i], tau));
  return total;
}

Var psi_negative_total(const Var& anchor, const std::vector<std::vector<Var>>& route_sets, double tau,
                       std::size_t routes) {
  Var total;
  for (std::size_t h = 0; h < routes && h < route_sets.size(); ++h)
    for (const Var& v : route_sets[h]) {
      Var term = psi(anchor, v, tau);
      total = total.valid() ? add(total, term) : term;
    }
  if (!total.valid()) return anchor.tape().constant(Tensor::scalar(0.0));
  return total;
}

Var contrastive_loss(const Var& psi_pos, const Var& psi_neg) {
  return sub(log(add(psi_pos, psi_neg)), log(psi_pos));
}

Var contrastive_loss(const ContrastiveBatch& batch) {
  Var total;
  for (std::size_t m = 0; m < batch.groups; ++m) {
    Var pos = psi_positive(batch.anchors[m], batch.positives[m], batch.tau);
    Var neg = psi_negative_total(batch.anchors[m], batch.route_sets(m), batch.tau, batch.routes);
    Var l = contrastive_loss(pos, neg);
    total = total.valid() ? add(total, l) : l;
  }
  return mul(total, 1.0 / static_cast<double>(batch.groups));
}

SaliencyLoss saliency_loss(const Var& maps, const Tensor& masks, bool dice_factor_two) {
  if (maps.shape() != masks.shape())
    throw ShapeError("saliency_loss: map " + to_string(maps.shape()) + " vs mask " + to_string(masks.shape()));
  Tape& tape = maps.tape();
  const std::size_t n = maps.shape()[0];
  const std::size_t pixels = maps.value().size() / n;
  const double factor = dice_factor_two ? 2.0 : 1.0;
  Var m = reshape(maps, Shape{n, pixels});
  Var t = tape.constant(masks.reshaped(Shape{n, pixels}));
  Var inter = reduce_sum(mul(m, t), 1);
  Var denom = reduce_sum(add(m, t), 1);
  SaliencyLoss out;
  std::vector<double> keep(n, 1.0), pad(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    if (denom.value()[i] < 1e-12) {
      out.degenerate = true;
      keep[i] = 0.0;
      pad[i] = 1.0;
    }
  // Degenerate images contribute a ratio of exactly 0 (loss 1): the denominator is padded to 1
  // and the numerator masked out.
  if (out.degenerate) {
    inter = mul(inter, tape.constant(Tensor(Shape{n}, keep)));
    denom = add(denom, tape.constant(Tensor(Shape{n}, pad)));
  }
  Var ratio = mul(div(inter, denom), factor);
  out.value = sub(tape.constant(Tensor::scalar(1.0)), reduce_mean(ratio, 0));
  return out;
}

Var total_loss(const Var& l_cl, const Var& l_s, const LossWeights& weights) {
  return add(mul(l_cl, weights.contrastive), mul(l_s, weights.saliency));
}

}  // namespace topicnet::objectives
