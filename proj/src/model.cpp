#include "topicnet/model.hpp"

#include <string>

#include "topicnet/gpp.hpp"

namespace topicnet {

BackboneConfig backbone_config(const TrainConfig& cfg) {
  BackboneConfig b;
  b.channels = cfg.channels;
  b.lateral_dim = cfg.lateral_dim;
  return b;
}

igp::Options igp_options(const TrainConfig& cfg) {
  igp::Options o;
  o.working_res = cfg.working_res;
  o.resize = cfg.resize_mode == "area" ? igp::ResizeMode::kArea : igp::ResizeMode::kBilinear;
  o.softmax_before_mean = cfg.igp_softmax_before_mean;
  return o;
}

ParameterSet init_model(const TrainConfig& cfg, std::uint64_t seed) {
  const std::vector<int> layers = cfg.gated_layers(true);
  ParameterSet p;
  Rng rng = Rng::keyed(seed, {0xBAC0});
  add_backbone_params(p, backbone_config(cfg), layers, rng);
  for (int layer : layers) {
    Rng lr = Rng::keyed(seed, {0x6A7E, static_cast<std::uint64_t>(layer)});
    const std::string l = std::to_string(layer);
    if (cfg.use_igp) igp::add_params(p, "igp." + l, cfg.lateral_dim, lr);
    if (cfg.use_gpp) gpp::add_attention_params(p, "gpp." + l, cfg.lateral_dim, lr);
    gpp::add_gate_params(p, "gate." + l, cfg.lateral_dim, lr);
  }
  return p;
}

ForwardOutput forward_topicnet(Tape& tape, const BoundParameters& params, const std::vector<GroupInput>& groups,
                               const TrainConfig& cfg, Mode mode) {
  if (groups.empty()) throw ConfigError("forward: no groups");
  const bool train = mode == Mode::kTrain;
  const bool contrastive = train && cfg.use_clm;
  if (contrastive && groups.size() < 2)
    throw ConfigError("forward: the contrastive objective needs M >= 2 groups, got " + std::to_string(groups.size()));

  const std::vector<int> layers = cfg.gated_layers(train);
  const BackboneConfig bcfg = backbone_config(cfg);
  const igp::Options iopt = igp_options(cfg);

  ForwardOutput out;
  std::vector<objectives::GroupLayerFeatures> feats;
  for (const GroupInput& g : groups) {
    const LayerFeatures f = encode(tape.constant(g.images), params, bcfg, layers);
    objectives::GroupLayerFeatures gf;
    for (int layer : layers) {
      const std::string l = std::to_string(layer);
      const Var& x = f.projected(layer);
      Var r = igp::to_working_resolution(x, iopt.working_res, iopt.resize);
      if (cfg.use_igp) r = igp::propagate(r, igp::bind(params, "igp." + l), iopt);
      if (cfg.use_gpp) r = gpp::pixel_self_attention(r, gpp::bind_attention(params, "gpp." + l));
      gf.projected[layer] = x;
      gf.gate[layer] = gpp::distill_channel_gate(r, gpp::bind_gate(params, "gate." + l));
    }
    const Var z3 = gpp::recalibrate(gf.projected.at(3), gf.gate.at(3));
    const Var z4 = gpp::recalibrate(gf.projected.at(4), gf.gate.at(4));
    const Var z5 = gpp::recalibrate(gf.projected.at(5), gf.gate.at(5));
    out.maps.push_back(decode(z3, z4, z5, f.stage(2), f.stage(1), params));
    if (contrastive) feats.push_back(std::move(gf));
  }
  if (!train) return out;

  std::vector<Tensor> masks;
  for (const GroupInput& g : groups) {
    if (g.masks.size() == 0) throw ConfigError("forward: training requires masks");
    masks.push_back(g.masks);
  }
  const Shape& ms = masks.front().shape();
  Tensor all_masks(Shape{masks.size() * ms[0], ms[1], ms[2], ms[3]});
  std::size_t off = 0;
  for (const Tensor& m : masks) {
    if (m.shape() != ms) throw ShapeError("forward: groups must share mask shapes");
    for (double v : m.data()) all_masks[off++] = v;
  }
  const objectives::SaliencyLoss ls = objectives::saliency_loss(concat(out.maps, 0), all_masks, cfg.dice_factor_two);
  out.loss_s = ls.value;
  out.degenerate = ls.degenerate;

  if (contrastive) {
    objectives::ContrastiveOptions copt;
    copt.positive_layers = cfg.positive_layers;
    copt.negative_layers = cfg.negative_layers;
    copt.tau = cfg.tau;
    const objectives::ContrastiveBatch batch = objectives::assemble_contrastive_batch(feats, copt);
    out.routes = batch.routes;
    out.negatives = batch.negative_count(0);
    out.loss_cl = objectives::contrastive_loss(batch);
    out.loss = objectives::total_loss(out.loss_cl, out.loss_s, {cfg.lambda1, cfg.lambda2});
  } else {
    out.loss_cl = tape.constant(Tensor::scalar(0.0));
    out.loss = out.loss_s * cfg.lambda2;
  }
  out.report = {out.loss_cl.value().item(), out.loss_s.value().item(), out.loss.value().item(), contrastive ? cfg.lambda1 : 0.0,
                cfg.lambda2};
  return out;
}

}  // namespace topicnet
