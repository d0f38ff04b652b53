#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <map>

#include "topicnet/netpbm.hpp"

namespace {

namespace fs = std::filesystem;
using topicnet::netpbm::read_file;

int run(const std::string& args) {
  const std::string cmd = std::string(TOPICNET_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path());
  return files;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / "topicnet_cli_test";
    fs::remove_all(root_);
    fs::create_directories(root_);
    toy_ = " --set image_size=32 --set images_per_group=2 --set categories=4 --set train_groups=2"
           " --set val_groups=2";
  }
  void TearDown() override { fs::remove_all(root_); }
  std::string p(const std::string& rel) const { return (root_ / rel).string(); }
  fs::path root_;
  std::string toy_;
};

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("gen-data --out " + p("d") + " --no-such-flag"), 1);
  EXPECT_EQ(run("gen-data"), 1);
  EXPECT_EQ(run("gen-data --out " + p("d") + " --set nonsense=1"), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, GenDataIsDeterministic) {
  ASSERT_EQ(run("gen-data --seed 7 --out " + p("d1") + toy_), 0);
  ASSERT_EQ(run("gen-data --seed 7 --out " + p("d2") + toy_), 0);
  const auto a = tree(root_ / "d1");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, tree(root_ / "d2"));
  ASSERT_EQ(run("gen-data --seed 8 --out " + p("d3") + toy_), 0);
  EXPECT_NE(a, tree(root_ / "d3"));
}

TEST_F(Cli, EvalOfGroundTruthScoresOne) {
  ASSERT_EQ(run("gen-data --seed 3 --out " + p("d") + toy_), 0);
  for (const auto& g : fs::directory_iterator(root_ / "d" / "val")) {
    fs::create_directories(root_ / "pred" / g.path().filename());
    for (const auto& f : fs::directory_iterator(g.path() / "gt"))
      fs::copy_file(f.path(), root_ / "pred" / g.path().filename() / f.path().filename());
  }
  ASSERT_EQ(run("eval --pred " + p("pred") + " --gt " + p("d/val") + " --out " + p("a.csv")), 0);
  ASSERT_EQ(run("eval --pred " + p("pred") + " --data " + p("d") + " --split val --out " + p("b.csv")), 0);
  const std::string csv = read_file(root_ / "a.csv");
  EXPECT_NE(csv.find("\noverall,1.000000,0.000000,"), std::string::npos) << csv;
  EXPECT_EQ(csv, read_file(root_ / "b.csv"));
  EXPECT_EQ(run("eval --pred " + p("missing") + " --gt " + p("d/val")), 2);
}

TEST_F(Cli, TrainInferEvalEndToEnd) {
  const std::string model = " --set channels=4,6,8,8,8 --set lateral_dim=8 --set working_res=3";
  ASSERT_EQ(run("gen-data --seed 5 --out " + p("d") + toy_), 0);
  ASSERT_EQ(run("train --quiet --data " + p("d") + " --out " + p("run") + toy_ + model +
                " --set epochs=1 --set steps_per_epoch=2"),
            0);
  EXPECT_TRUE(fs::exists(root_ / "run" / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(root_ / "run" / "runlog.csv"));
  ASSERT_EQ(run("infer --checkpoint " + p("run/checkpoint.bin") + " --data " + p("d") + " --split val --out " +
                p("pred") + toy_ + model),
            0);
  std::size_t inputs = 0, outputs = 0;
  for (const auto& g : fs::directory_iterator(root_ / "d" / "val")) {
    for ([[maybe_unused]] const auto& f : fs::directory_iterator(g.path() / "img")) ++inputs;
    for ([[maybe_unused]] const auto& f : fs::directory_iterator(root_ / "pred" / g.path().filename())) ++outputs;
  }
  EXPECT_EQ(inputs, 4u);
  EXPECT_EQ(outputs, inputs);
  EXPECT_EQ(run("eval --pred " + p("pred") + " --data " + p("d")), 0);
  // Runtime failures exit 2.
  EXPECT_EQ(run("train --quiet --data " + p("none") + " --out " + p("run2") + toy_ + model), 2);
  EXPECT_EQ(run("infer --checkpoint " + p("none.bin") + " --data " + p("d") + " --out " + p("pred2") + toy_), 2);
}

TEST_F(Cli, ConfigFileWithFlagOverride) {
  topicnet::netpbm::write_file(root_ / "gen.cfg", "image_size=32\nimages_per_group=2\ncategories=4\ntrain_groups=1\nval_groups=1\nseed=9\n");
  ASSERT_EQ(run("gen-data --config " + p("gen.cfg") + " --out " + p("a")), 0);
  ASSERT_EQ(run("gen-data --config " + p("gen.cfg") + " --seed 9 --out " + p("b")), 0);
  ASSERT_EQ(run("gen-data --config " + p("gen.cfg") + " --seed 10 --out " + p("c")), 0);
  EXPECT_EQ(tree(root_ / "a"), tree(root_ / "b"));
  EXPECT_NE(tree(root_ / "a"), tree(root_ / "c"));
}

TEST(CliGradCheck, ExitStatusFollowsTolerance) {
  EXPECT_EQ(run("grad-check --coords 4"), 0);
  EXPECT_EQ(run("grad-check --coords 4 --fault 1e-3"), 2);
}

}  // namespace
