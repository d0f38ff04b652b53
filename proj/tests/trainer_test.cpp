#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "topicnet/config.hpp"
#include "topicnet/model.hpp"
#include "topicnet/netpbm.hpp"
#include "topicnet/trainer.hpp"

namespace topicnet {
namespace {

namespace fs = std::filesystem;

// Small enough that a handful of optimiser steps take well under a second.
TrainConfig toy_config(const fs::path& data) {
  TrainConfig c;
  c.data_dir = data.string();
  c.image_size = 32;
  c.images_per_group = 2;
  c.categories = 4;
  c.train_groups = 4;
  c.val_groups = 1;
  c.channels = {6, 8, 12, 12, 12};
  c.lateral_dim = 12;
  c.working_res = 4;
  c.epochs = 2;
  c.steps_per_epoch = 6;
  return c;
}

std::vector<GroupInput> inputs_for(const TrainConfig& cfg, std::size_t m, std::uint64_t seed) {
  std::vector<data::ImageGroup> groups;
  for (std::size_t g = 0; g < m; ++g) groups.push_back(data::generate_group(cfg.dataset(), seed, g));
  const data::ChannelStats stats = data::compute_stats(groups);
  std::vector<GroupInput> in;
  for (const auto& g : groups) in.push_back(group_input(g, stats));
  return in;
}

std::string strip_seconds(const std::string& runlog) {
  std::string out;
  std::size_t start = 0;
  while (start < runlog.size()) {
    const std::size_t end = runlog.find('\n', start);
    const std::string line = runlog.substr(start, end - start);
    out += line.substr(0, line.rfind(',')) + "\n";
    start = end + 1;
  }
  return out;
}

// ---- config ----

TEST(Config, ParsesFileAndOverrides) {
  const fs::path p = fs::temp_directory_path() / "topicnet_cfg.txt";
  netpbm::write_file(p, "# comment\nimage_size = 32\npositive_layers=1..5\ntau=0.5\nuse_clm=false\n");
  TrainConfig c = load_config(p);
  EXPECT_EQ(c.image_size, 32u);
  EXPECT_EQ(c.positive_layers, (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_EQ(c.tau, 0.5);
  EXPECT_FALSE(c.use_clm);
  apply_overrides(c, {"tau=0.07", "positive_layers=5,4"});
  EXPECT_EQ(c.tau, 0.07);
  EXPECT_EQ(c.positive_layers, (std::vector<int>{4, 5}));
  fs::remove(p);
}

TEST(Config, EchoRoundTripsAndHashTracksValues) {
  TrainConfig c;
  c.tau = 0.1;
  c.negative_layers = {4, 5};
  const fs::path p = fs::temp_directory_path() / "topicnet_cfg_echo.txt";
  netpbm::write_file(p, c.echo());
  const TrainConfig back = load_config(p);
  EXPECT_EQ(back.echo(), c.echo());
  EXPECT_EQ(back.hash(), c.hash());
  TrainConfig d = c;
  d.seed = c.seed + 1;
  EXPECT_NE(d.hash(), c.hash());
  fs::remove(p);
}

TEST(Config, RejectsBadValues) {
  TrainConfig c;
  EXPECT_THROW(c.set("bogus", "1"), ConfigError);
  EXPECT_THROW(c.set("image_size", "-4"), ConfigError);
  EXPECT_THROW(c.set("tau", "abc"), ConfigError);
  EXPECT_THROW(c.set("use_igp", "maybe"), ConfigError);
  EXPECT_THROW(c.set("positive_layers", "3,6"), ConfigError);
  EXPECT_THROW(c.set("positive_layers", "4,4,5"), ConfigError);
  EXPECT_THROW(apply_overrides(c, {"tau"}), ConfigError);

  auto invalid = [](auto mutate) {
    TrainConfig x;
    mutate(x);
    EXPECT_THROW(x.validate(), ConfigError);
  };
  invalid([](TrainConfig& x) { x.groups_per_step = 1; });
  invalid([](TrainConfig& x) { x.image_size = 40; });
  invalid([](TrainConfig& x) { x.working_res = 1; });
  invalid([](TrainConfig& x) { x.images_per_group = 0; });
  invalid([](TrainConfig& x) { x.positive_layers = {3, 4}; });
  invalid([](TrainConfig& x) { x.resize_mode = "nearest"; });
  TrainConfig ok;
  EXPECT_NO_THROW(ok.validate());
}

TEST(Config, GatedLayers) {
  TrainConfig c;
  EXPECT_EQ(c.gated_layers(true), (std::vector<int>{3, 4, 5}));
  c.positive_layers = {1, 2, 3, 4, 5};
  EXPECT_EQ(c.gated_layers(true), (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_EQ(c.gated_layers(false), (std::vector<int>{3, 4, 5}));
  c.use_clm = false;
  EXPECT_EQ(c.gated_layers(true), (std::vector<int>{3, 4, 5}));
}

// ---- forward ----

TEST(Forward, DefaultShapesAndRoutes) {
  TrainConfig cfg;
  const ParameterSet params = init_model(cfg, 1);
  const auto in = inputs_for(cfg, 2, 5);
  Tape tape;
  BoundParameters bound(tape, params, false);
  objectives::reset_psi_evaluations();
  const ForwardOutput out = forward_topicnet(tape, bound, in, cfg, Mode::kTrain);
  ASSERT_EQ(out.maps.size(), 2u);
  for (const Var& m : out.maps) EXPECT_EQ(m.shape(), (Shape{4, 1, 64, 64}));
  EXPECT_EQ(out.routes, 3u);
  EXPECT_GT(objectives::psi_evaluations(), 0u);
  EXPECT_NEAR(out.report.l, out.report.l_cl + out.report.l_s, 1e-12);
  EXPECT_GT(out.report.l_s, 0.0);
  EXPECT_LE(out.report.l_s, 1.0);
}

TEST(Forward, ThreeGroupsUseTwoRoutes) {
  TrainConfig cfg = tiny_config();
  cfg.train_groups = 3;
  cfg.groups_per_step = 3;
  const ParameterSet params = init_model(cfg, 2);
  Tape tape;
  BoundParameters bound(tape, params, false);
  const ForwardOutput out = forward_topicnet(tape, bound, inputs_for(cfg, 3, 2), cfg, Mode::kTrain);
  EXPECT_EQ(out.routes, 2u);
  EXPECT_EQ(out.maps.size(), 3u);
}

TEST(Forward, InferenceRunsNoContrastiveTerms) {
  TrainConfig cfg = tiny_config();
  cfg.positive_layers = {1, 2, 3, 4, 5};
  const ParameterSet params = init_model(cfg, 3);
  Tape tape;
  BoundParameters bound(tape, params, false);
  objectives::reset_psi_evaluations();
  const ForwardOutput out = forward_topicnet(tape, bound, inputs_for(cfg, 1, 3), cfg, Mode::kInfer);
  EXPECT_EQ(objectives::psi_evaluations(), 0u);
  EXPECT_FALSE(out.loss.valid());
  ASSERT_EQ(out.maps.size(), 1u);
  EXPECT_EQ(out.maps[0].shape(), (Shape{2, 1, 16, 16}));
}

TEST(Forward, InferenceMatchesTrainingMaps) {
  TrainConfig cfg = tiny_config();
  const ParameterSet params = init_model(cfg, 4);
  const auto in = inputs_for(cfg, 2, 4);
  Tape a, b;
  BoundParameters ba(a, params, false), bb(b, params, false);
  const ForwardOutput tr = forward_topicnet(a, ba, in, cfg, Mode::kTrain);
  const ForwardOutput inf = forward_topicnet(b, bb, {in[1]}, cfg, Mode::kInfer);
  EXPECT_EQ(tr.maps[1].value(), inf.maps[0].value());
}

TEST(Forward, WithoutContrastiveModule) {
  TrainConfig cfg = tiny_config();
  cfg.use_clm = false;
  cfg.lambda2 = 0.5;
  const ParameterSet params = init_model(cfg, 5);
  Tape tape;
  BoundParameters bound(tape, params, false);
  objectives::reset_psi_evaluations();
  const ForwardOutput out = forward_topicnet(tape, bound, inputs_for(cfg, 2, 5), cfg, Mode::kTrain);
  EXPECT_EQ(objectives::psi_evaluations(), 0u);
  EXPECT_EQ(out.report.l_cl, 0.0);
  EXPECT_NEAR(out.report.l, 0.5 * out.report.l_s, 1e-15);
}

TEST(Forward, ContrastiveNeedsTwoGroupsAndMasks) {
  TrainConfig cfg = tiny_config();
  const ParameterSet params = init_model(cfg, 6);
  auto in = inputs_for(cfg, 2, 6);
  Tape tape;
  BoundParameters bound(tape, params, false);
  EXPECT_THROW(forward_topicnet(tape, bound, {in[0]}, cfg, Mode::kTrain), ConfigError);
  in[1].masks = Tensor();
  EXPECT_THROW(forward_topicnet(tape, bound, in, cfg, Mode::kTrain), ConfigError);
}

TEST(Forward, AblationsDropTheirParameters) {
  TrainConfig cfg = tiny_config();
  cfg.use_igp = false;
  cfg.use_gpp = false;
  const ParameterSet params = init_model(cfg, 7);
  for (const auto& n : params.names()) {
    EXPECT_EQ(n.rfind("igp.", 0), std::string::npos) << n;
    EXPECT_EQ(n.rfind("gpp.", 0), std::string::npos) << n;
  }
  Tape tape;
  BoundParameters bound(tape, params, false);
  const ForwardOutput out = forward_topicnet(tape, bound, inputs_for(cfg, 2, 7), cfg, Mode::kTrain);
  EXPECT_TRUE(std::isfinite(out.report.l));
}

// ---- sampler ----

TEST(Sampler, DistinctCategories) {
  std::vector<data::ImageGroup> groups(6);
  for (std::size_t i = 0; i < groups.size(); ++i) groups[i].category = i % 3;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    const auto picked = sample_groups(groups, 3, rng);
    std::set<std::size_t> cats;
    for (std::size_t i : picked) cats.insert(groups[i].category);
    EXPECT_EQ(cats.size(), 3u);
  }
  Rng rng(1);
  EXPECT_THROW(sample_groups(groups, 4, rng), ConfigError);
}

// ---- gradient check ----

TEST(GradCheck, TinyConfigPassesAndListsEveryTensorOnce) {
  const TrainConfig cfg = tiny_config();
  const GradCheckReport r = grad_check(cfg, 1);
  const ParameterSet params = init_model(cfg, 1);
  ASSERT_EQ(r.entries.size(), params.size());
  std::set<std::string> names;
  for (std::size_t k = 0; k < r.entries.size(); ++k) {
    EXPECT_EQ(r.entries[k].name, params.names()[k]);
    EXPECT_EQ(r.entries[k].coords, std::min<std::size_t>(20, params.values()[k].size()));
    names.insert(r.entries[k].name);
  }
  EXPECT_EQ(names.size(), r.entries.size());
  EXPECT_LE(r.max_rel_error, kGradCheckTolerance);
  EXPECT_GT(r.loss_cl, 0.0);
  EXPECT_GT(r.loss_s, 0.0);
}

TEST(GradCheck, CorruptedSigmoidBackwardFails) {
  debug::ScopedSigmoidBackwardFault fault(1e-3);
  const GradCheckReport r = grad_check(tiny_config(), 1, 1e-3, 4);
  EXPECT_GT(r.max_rel_error, kGradCheckTolerance);
}

// ---- training ----

class Training : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / "topicnet_trainer_test";
    fs::remove_all(root_);
    cfg_ = toy_config(root_ / "data");
    data::generate_dataset(cfg_.dataset(), 11, root_ / "data");
  }
  void TearDown() override { fs::remove_all(root_); }
  fs::path root_;
  TrainConfig cfg_;
};

TEST_F(Training, WritesRunArtifactsAndIsDeterministic) {
  const TrainResult a = train(cfg_, root_ / "a");
  const TrainResult b = train(cfg_, root_ / "b");
  ASSERT_EQ(a.epochs.size(), 2u);
  EXPECT_EQ(a.epochs[0].epoch, 1u);
  EXPECT_EQ(a.epochs[1].epoch, 2u);
  EXPECT_EQ(a.params, b.params);
  const std::string la = netpbm::read_file(root_ / "a" / "runlog.csv");
  EXPECT_EQ(la.substr(0, la.find('\n')), kRunLogHeader);
  EXPECT_EQ(std::count(la.begin(), la.end(), '\n'), 3);
  EXPECT_EQ(strip_seconds(la), strip_seconds(netpbm::read_file(root_ / "b" / "runlog.csv")));
  EXPECT_EQ(netpbm::read_file(root_ / "a" / "checkpoint.bin"), netpbm::read_file(root_ / "b" / "checkpoint.bin"));
  const std::string conf = netpbm::read_file(root_ / "a" / "config.txt");
  EXPECT_EQ(conf, netpbm::read_file(root_ / "b" / "config.txt"));
  EXPECT_NE(conf.find(cfg_.echo()), std::string::npos);
  EXPECT_NE(conf.find("hash="), std::string::npos);

  TrainConfig other = cfg_;
  other.seed = 2;
  EXPECT_FALSE(train(other, root_ / "c").params == a.params);
}

TEST_F(Training, CheckpointRoundTripGivesIdenticalMetrics) {
  const TrainResult r = train(cfg_, root_ / "run");
  const ParameterSet loaded = load_checkpoint(root_ / "run" / "checkpoint.bin");
  EXPECT_EQ(loaded, r.params);
  const data::Manifest m = data::read_manifest(root_ / "data");
  const auto val = data::load_split(root_ / "data", m, "val");
  EXPECT_EQ(evaluate_groups(loaded, cfg_, val, m.stats).csv(), evaluate_groups(r.params, cfg_, val, m.stats).csv());
  EXPECT_NEAR(evaluate_groups(loaded, cfg_, val, m.stats).overall.f_mu, r.epochs.back().val_fmu, 1e-12);
}

TEST_F(Training, NonFiniteLossAbortsAndKeepsLastCheckpoint) {
  ParameterSet after_epoch1;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& rec) {
    if (rec.epoch == 1) after_epoch1 = load_checkpoint(root_ / "run" / "checkpoint.bin");
  };
  hooks.after_step = [](std::size_t epoch, std::size_t step, ParameterSet& p) {
    if (epoch == 2 && step == 1) p.get("dec.head.b")[0] = std::nan("");
  };
  try {
    train(cfg_, root_ / "run", hooks);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 2 step 2"), std::string::npos) << e.what();
  }
  EXPECT_EQ(load_checkpoint(root_ / "run" / "checkpoint.bin"), after_epoch1);
  const std::string log = netpbm::read_file(root_ / "run" / "runlog.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 2);
}

TEST_F(Training, MissingDatasetAndMismatchedConfig) {
  TrainConfig c = cfg_;
  c.data_dir = (root_ / "nothing").string();
  EXPECT_THROW(train(c, root_ / "run"), IoError);
  c = cfg_;
  c.images_per_group = 3;
  EXPECT_THROW(train(c, root_ / "run"), ConfigError);
}

TEST_F(Training, InferWritesOneMapPerImage) {
  const ParameterSet params = init_model(cfg_, 1);
  infer_split(params, cfg_, root_ / "data", "train", root_ / "pred");
  const data::Manifest m = data::read_manifest(root_ / "data");
  std::size_t maps = 0;
  for (const auto& name : m.train) {
    for (const auto& f : fs::directory_iterator(root_ / "pred" / name)) {
      const Tensor t = netpbm::read(f.path());
      EXPECT_EQ(t.shape(), (Shape{1, 32, 32}));
      ++maps;
    }
  }
  EXPECT_EQ(maps, m.train.size() * cfg_.images_per_group);
  const metrics::MetricReport r = metrics::evaluate_dataset(root_ / "pred", root_ / "data" / "train");
  EXPECT_EQ(r.groups.size(), m.train.size());
}

// Both loss terms should go down from epoch 1 to epoch 2 for most seeds.
TEST_F(Training, SmokeLossesDecreaseInMostSeeds) {
  int decreasing = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainConfig c = cfg_;
    c.seed = seed;
    const TrainResult r = train(c, root_ / ("s" + std::to_string(seed)));
    ASSERT_EQ(r.epochs.size(), 2u);
    if (r.epochs[1].loss_cl < r.epochs[0].loss_cl && r.epochs[1].loss_s < r.epochs[0].loss_s) ++decreasing;
  }
  EXPECT_GE(decreasing, 2);
}

}  // namespace
}  // namespace topicnet
