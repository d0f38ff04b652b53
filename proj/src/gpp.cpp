#include "topicnet/gpp.hpp"

#include <cmath>

#include "topicnet/backbone.hpp"
#include "topicnet/igp.hpp"

namespace topicnet::gpp {

namespace {

void add_pointwise(ParameterSet& p, const std::string& name, std::size_t out, std::size_t in, Rng& rng) {
  p.add(name + ".w", fan_in_uniform(Shape{out, in, 1, 1}, in, kLinearGain, rng));
  p.add(name + ".b", Tensor(Shape{out}, 0.0));
}

}  // namespace

void add_attention_params(ParameterSet& params, const std::string& prefix, std::size_t dim, Rng& rng) {
  const std::size_t half = dim / 2;
  if (half == 0) throw ConfigError("gpp: feature dim must be >= 2");
  add_pointwise(params, prefix + ".q", half, dim, rng);
  add_pointwise(params, prefix + ".k", half, dim, rng);
  add_pointwise(params, prefix + ".v", dim, dim, rng);
  add_pointwise(params, prefix + ".o", dim, dim, rng);
}

void add_gate_params(ParameterSet& params, const std::string& prefix, std::size_t dim, Rng& rng) {
  params.add(prefix + ".w", fan_in_uniform(Shape{dim, dim}, dim, kLinearGain, rng));
  params.add(prefix + ".b", Tensor(Shape{dim}, 0.0));
}

AttentionWeights bind_attention(const BoundParameters& p, const std::string& prefix) {
  return {p(prefix + ".q.w"), p(prefix + ".q.b"), p(prefix + ".k.w"), p(prefix + ".k.b"),
          p(prefix + ".v.w"), p(prefix + ".v.b"), p(prefix + ".o.w"), p(prefix + ".o.b")};
}

GateWeights bind_gate(const BoundParameters& p, const std::string& prefix) {
  return {p(prefix + ".w"), p(prefix + ".b")};
}

Var attention_matrix(const Var& r, const AttentionWeights& w) {
  Var q = igp::to_tokens(conv2d(r, w.q_w, w.q_b));
  Var k = igp::to_tokens(conv2d(r, w.k_w, w.k_b));
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
  return softmax(mul(matmul(q, permute(k, {1, 0})), scale), 1);
}

Var pixel_self_attention(const Var& r, const AttentionWeights& w) {
  const Shape& s = r.shape();
  if (s.size() != 4) throw ShapeError("pixel_self_attention expects [N,D,S,S]");
  Var attn = attention_matrix(r, w);
  Var v = igp::to_tokens(conv2d(r, w.v_w, w.v_b));       // [T, D]
  Var mixed = matmul(attn, v);                            // [T, D]
  Var map = permute(reshape(mixed, Shape{s[0], s[2], s[3], s[1]}), {0, 3, 1, 2});
  return add(r, conv2d(map, w.o_w, w.o_b));
}

Var distill_channel_gate(const Var& attended, const GateWeights& w) {
  const Shape& s = attended.shape();
  if (s.size() != 4) throw ShapeError("distill_channel_gate expects [N,D,S,S]");
  const std::size_t d = s[1];
  if (w.w.shape() != Shape{d, d} || w.b.shape() != Shape{d})
    throw ShapeError("distill_channel_gate: gate weights do not match channel dim");
  // [N,D,S,S] -> [D, N*S*S] -> mean over the last axis.
  Var pooled = reduce_mean(reshape(permute(attended, {1, 0, 2, 3}), Shape{d, s[0] * s[2] * s[3]}), 1);
  Var pre = add(reshape(matmul(w.w, reshape(pooled, Shape{d, 1})), Shape{d}), w.b);
  return sigmoid(pre);
}

Var recalibrate(const Var& x, const Var& gate) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("recalibrate expects [N,D,H,W]");
  if (gate.shape() != Shape{s[1]})
    throw ShapeError("recalibrate: gate " + to_string(gate.shape()) + " does not match channels of " +
                     to_string(s));
  return mul(x, reshape(gate, Shape{1, s[1], 1, 1}));
}

}  // namespace topicnet::gpp
