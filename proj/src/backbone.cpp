#include "topicnet/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace topicnet {

namespace {

std::string stage_name(int stage, int conv) {
  return "enc.s" + std::to_string(stage) + ".conv" + std::to_string(conv);
}

void add_conv(ParameterSet& p, const std::string& name, std::size_t out, std::size_t in,
              std::size_t k, double gain, Rng& rng) {
  p.add(name + ".w", fan_in_uniform(Shape{out, in, k, k}, in * k * k, gain, rng));
  p.add(name + ".b", Tensor(Shape{out}, 0.0));
}

Var conv(const Var& x, const BoundParameters& p, const std::string& name, Conv2dOptions opt) {
  return conv2d(x, p(name + ".w"), p(name + ".b"), opt);
}

void require_same(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string("decode: ") + what + " shape " + to_string(a.shape()) +
                     " does not match " + to_string(b.shape()));
}

}  // namespace

const Var& LayerFeatures::projected(int layer) const {
  auto it = lateral.find(layer);
  if (it == lateral.end())
    throw ConfigError("lateral projection for layer " + std::to_string(layer) + " was not computed");
  return it->second;
}

Tensor fan_in_uniform(const Shape& shape, std::size_t fan_in, double gain, Rng& rng) {
  const double bound = std::min(1.0, gain / std::sqrt(static_cast<double>(fan_in)));
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

void add_backbone_params(ParameterSet& params, const BackboneConfig& cfg,
                         const std::vector<int>& lateral_layers, Rng& rng) {
  std::size_t in = cfg.in_channels;
  for (int s = 1; s <= 5; ++s) {
    const std::size_t c = cfg.channels[static_cast<std::size_t>(s - 1)];
    add_conv(params, stage_name(s, 1), c, in, 3, kReluGain, rng);
    add_conv(params, stage_name(s, 2), c, c, 3, kReluGain, rng);
    in = c;
  }
  for (int layer : lateral_layers) {
    const std::size_t c = cfg.channels.at(static_cast<std::size_t>(layer - 1));
    add_conv(params, "lat." + std::to_string(layer), cfg.lateral_dim, c, 1, kLinearGain, rng);
  }
  const std::size_t d = cfg.lateral_dim, c1 = cfg.channels[0], c2 = cfg.channels[1];
  add_conv(params, "dec.up2", c2, d + c2, 3, kReluGain, rng);
  add_conv(params, "dec.up1", c1, c2 + c1, 3, kReluGain, rng);
  add_conv(params, "dec.head", 1, c1, 3, kLinearGain, rng);
}

ParameterSet init_backbone_params(const BackboneConfig& cfg, const std::vector<int>& lateral_layers,
                                  std::uint64_t seed) {
  ParameterSet p;
  Rng rng = Rng::keyed(seed, {0xBAC0});
  add_backbone_params(p, cfg, lateral_layers, rng);
  return p;
}

LayerFeatures encode(const Var& images, const BoundParameters& params, const BackboneConfig& cfg,
                     const std::vector<int>& lateral_layers) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != cfg.in_channels)
    throw ShapeError("encode expects [N," + std::to_string(cfg.in_channels) + ",H,W], got " + to_string(s));
  if (s[2] % 16 != 0 || s[3] % 16 != 0)
    throw ShapeError("encode: image size must be a multiple of 16, got " + to_string(s));
  LayerFeatures f;
  Var x = images;
  for (int st = 1; st <= 5; ++st) {
    const std::size_t stride = st == 1 ? 1 : 2;
    x = relu(conv(x, params, stage_name(st, 1), {.stride = stride, .pad = 1}));
    x = relu(conv(x, params, stage_name(st, 2), {.stride = 1, .pad = 1}));
    f.stages[static_cast<std::size_t>(st - 1)] = x;
  }
  for (int layer : lateral_layers)
    f.lateral[layer] = conv(f.stage(layer), params, "lat." + std::to_string(layer), {});
  return f;
}

Var decode(const Var& z3, const Var& z4, const Var& z5, const Var& x2, const Var& x1,
           const BoundParameters& params) {
  Var p4 = upsample_nearest2x(z5);
  require_same(p4, z4, "z4");
  p4 = add(p4, z4);
  Var p3 = upsample_nearest2x(p4);
  require_same(p3, z3, "z3");
  p3 = add(p3, z3);
  Var u2 = upsample_nearest2x(p3);
  if (u2.shape()[2] != x2.shape()[2] || u2.shape()[0] != x2.shape()[0])
    throw ShapeError("decode: skip x2 shape " + to_string(x2.shape()) + " incompatible with " +
                     to_string(u2.shape()));
  Var d2 = relu(conv(concat({u2, x2}, 1), params, "dec.up2", {.stride = 1, .pad = 1}));
  Var u1 = upsample_nearest2x(d2);
  if (u1.shape()[2] != x1.shape()[2] || u1.shape()[0] != x1.shape()[0])
    throw ShapeError("decode: skip x1 shape " + to_string(x1.shape()) + " incompatible with " +
                     to_string(u1.shape()));
  Var d1 = relu(conv(concat({u1, x1}, 1), params, "dec.up1", {.stride = 1, .pad = 1}));
  return sigmoid(conv(d1, params, "dec.head", {.stride = 1, .pad = 1}));
}

}  // namespace topicnet
