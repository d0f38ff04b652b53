#include "topicnet/igp.hpp"

#include "topicnet/backbone.hpp"

namespace topicnet::igp {

void add_params(ParameterSet& params, const std::string& prefix, std::size_t dim, Rng& rng) {
  const std::size_t half = dim / 2;
  if (half == 0) throw ConfigError("igp: feature dim must be >= 2");
  for (const char* proj : {"g", "theta", "phi"}) {
    params.add(prefix + "." + proj + ".w", fan_in_uniform(Shape{half, dim, 1, 1}, dim, kLinearGain, rng));
    params.add(prefix + "." + proj + ".b", Tensor(Shape{half}, 0.0));
  }
}

Weights bind(const BoundParameters& p, const std::string& prefix) {
  return {p(prefix + ".g.w"),     p(prefix + ".g.b"),   p(prefix + ".theta.w"),
          p(prefix + ".theta.b"), p(prefix + ".phi.w"), p(prefix + ".phi.b")};
}

Var to_working_resolution(const Var& x, std::size_t res, ResizeMode mode) {
  if (res < 2) throw ConfigError("working resolution must be >= 2");
  if (x.shape().size() != 4) throw ShapeError("to_working_resolution expects [N,D,H,W]");
  if (x.shape()[2] == res && x.shape()[3] == res) return x;
  return mode == ResizeMode::kArea ? resize_area(x, res, res) : resize_bilinear(x, res, res);
}

Var to_tokens(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("to_tokens expects [N,C,H,W]");
  return reshape(permute(x, {0, 2, 3, 1}), Shape{s[0] * s[2] * s[3], s[1]});
}

AffinityStack build_pairwise_affinities(const Var& x, const Weights& w) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] != s[3]) throw ShapeError("igp expects a square [N,D,S,S] map");
  Var g = to_tokens(conv2d(x, w.g_w, w.g_b));
  Var theta = to_tokens(conv2d(x, w.theta_w, w.theta_b));
  Var phi = to_tokens(conv2d(x, w.phi_w, w.phi_b));
  AffinityStack a;
  a.a_g = matmul(g, permute(g, {1, 0}));
  a.a_theta_phi = matmul(theta, permute(phi, {1, 0}));
  a.images = s[0];
  a.res = s[2];
  return a;
}

Var reduce_over_partner_images(const Var& affinity, std::size_t images) {
  const Shape& s = affinity.shape();
  if (s.size() != 2 || s[0] != s[1] || images == 0 || s[0] % images != 0)
    throw ShapeError("reduce_over_partner_images: bad affinity shape " + to_string(s));
  const std::size_t pixels = s[0] / images;
  // Row-major [N*P, N*P] is exactly [n1, p, n2, q]; the axis move to [p, q, n1, n2] is the
  // permutation, not the reshape.
  Var four = reshape(affinity, Shape{images, pixels, images, pixels});
  Var moved = permute(four, {1, 3, 0, 2});
  return reduce_max(moved, 3);
}

Var compose_inter_image_similarity(const Var& a_g_reduced, const Var& a_tp_reduced) {
  const Shape& s = a_g_reduced.shape();
  if (s.size() != 3 || s[0] != s[1] || a_tp_reduced.shape() != s)
    throw ShapeError("compose_inter_image_similarity: inputs must both be [P,P,N]");
  Var normalized = softmax(a_tp_reduced, 1);          // [p, q, n2], sums to 1 over q
  Var g_moved = permute(a_g_reduced, {0, 2, 1});      // [p, n1, q]
  return matmul(g_moved, normalized);                 // [p, n1, n2]
}

Var inter_image_weights(const Var& similarity, bool softmax_before_mean) {
  if (similarity.shape().size() != 3) throw ShapeError("inter_image_weights expects [P,N,N]");
  if (softmax_before_mean) return reduce_mean(softmax(similarity, 2), 0);
  return softmax(reduce_mean(similarity, 0), 1);
}

Var group_semantics_mix(const Var& similarity, const Var& x, bool softmax_before_mean) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("group_semantics_mix expects x as [N,D,S,S]");
  Var w = inter_image_weights(similarity, softmax_before_mean);
  if (w.shape() != Shape{s[0], s[0]})
    throw ShapeError("group_semantics_mix: similarity image count does not match x");
  Var flat = reshape(x, Shape{s[0], s[1] * s[2] * s[3]});
  return reshape(matmul(w, flat), s);
}

Var propagate(const Var& x, const Weights& w, const Options& opt) {
  AffinityStack a = build_pairwise_affinities(x, w);
  Var g_red = reduce_over_partner_images(a.a_g, a.images);
  Var tp_red = reduce_over_partner_images(a.a_theta_phi, a.images);
  Var sim = compose_inter_image_similarity(g_red, tp_red);
  return group_semantics_mix(sim, x, opt.softmax_before_mean);
}

}  // namespace topicnet::igp
