// topicnet command-line driver: gen-data, train, infer, eval, grad-check.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "topicnet/config.hpp"
#include "topicnet/data.hpp"
#include "topicnet/metrics.hpp"
#include "topicnet/netpbm.hpp"
#include "topicnet/params.hpp"
#include "topicnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace topicnet;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string data;
  std::uint64_t seed = 0;
  bool have_seed = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value configuration file");
  cmd->add_option("--set", c.overrides, "override a configuration key (key=value), repeatable");
  cmd->add_option("--data", c.data, "dataset root");
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&c](const std::uint64_t& s) {
        c.seed = s;
        c.have_seed = true;
      },
      "random seed");
}

TrainConfig resolve(const Common& c) {
  TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_config(c.config);
  if (c.have_seed) cfg.seed = c.seed;
  if (!c.data.empty()) cfg.data_dir = c.data;
  apply_overrides(cfg, c.overrides);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"topicnet: group co-saliency detection on synthetic data"};
  app.require_subcommand(1);

  Common gen_c, train_c, infer_c, eval_c, gc_c;
  std::string gen_out, train_out, infer_out, eval_out, checkpoint, split = "val", pred, gt;
  double fault = 0.0, step = 1e-3;
  std::size_t coords = 20;
  bool quiet = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset tree");
  add_common(gen, gen_c);
  gen->add_option("--out", gen_out, "output root")->required();

  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, train_c);
  tr->add_option("--out", train_out, "run directory (config.txt, runlog.csv, checkpoint.bin)")->required();
  tr->add_flag("--quiet", quiet, "do not print per-epoch progress");

  auto* inf = app.add_subcommand("infer", "write predicted saliency maps for a split");
  add_common(inf, infer_c);
  inf->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  inf->add_option("--split", split, "split name (train or val)");
  inf->add_option("--out", infer_out, "prediction directory")->required();

  auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
  add_common(ev, eval_c);
  ev->add_option("--pred", pred, "prediction directory")->required();
  ev->add_option("--gt", gt, "split directory holding <group>/gt/imgMM.pgm");
  ev->add_option("--split", split, "split name, used with --data when --gt is absent");
  ev->add_option("--out", eval_out, "CSV output file (default: stdout)");

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every parameter tensor");
  add_common(gc, gc_c);
  gc->add_option("--fault", fault, "scale the sigmoid backward rule by (1 + fault), to test the checker");
  gc->add_option("--step", step, "finite-difference step h");
  gc->add_option("--coords", coords, "coordinates checked per tensor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      const TrainConfig cfg = resolve(gen_c);
      const data::Manifest m = data::generate_dataset(cfg.dataset(), cfg.seed, gen_out);
      std::printf("wrote %zu train and %zu val groups to %s\n", m.train.size(), m.val.size(), gen_out.c_str());
    } else if (*tr) {
      const TrainConfig cfg = resolve(train_c);
      TrainHooks hooks;
      if (!quiet) {
        std::fputs((std::string(kRunLogHeader) + "\n").c_str(), stdout);
        hooks.on_epoch = [](const EpochRecord& r) {
          std::fputs(runlog_row(r).c_str(), stdout);
          std::fflush(stdout);
        };
      }
      train(cfg, train_out, hooks);
      if (!quiet) std::printf("checkpoint: %s\n", (fs::path(train_out) / "checkpoint.bin").c_str());
    } else if (*inf) {
      const TrainConfig cfg = resolve(infer_c);
      cfg.validate();
      infer_split(load_checkpoint(checkpoint), cfg, cfg.data_dir, split, infer_out);
    } else if (*ev) {
      const TrainConfig cfg = resolve(eval_c);
      const fs::path gt_dir = gt.empty() ? fs::path(cfg.data_dir) / split : fs::path(gt);
      const metrics::MetricReport r = metrics::evaluate_dataset(pred, gt_dir);
      for (const auto& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      if (eval_out.empty()) std::fputs(r.csv().c_str(), stdout);
      else netpbm::write_file(eval_out, r.csv());
    } else if (*gc) {
      TrainConfig cfg = tiny_config();
      if (!gc_c.config.empty()) cfg = load_config(gc_c.config);
      apply_overrides(cfg, gc_c.overrides);
      const std::uint64_t seed = gc_c.have_seed ? gc_c.seed : cfg.seed;
      GradCheckReport rep;
      if (fault != 0.0) {
        debug::ScopedSigmoidBackwardFault f(fault);
        rep = grad_check(cfg, seed, step, coords);
      } else {
        rep = grad_check(cfg, seed, step, coords);
      }
      std::fputs(rep.text().c_str(), stdout);
      const bool ok = rep.max_rel_error <= kGradCheckTolerance;
      std::printf("%s (tolerance %.0e)\n", ok ? "PASS" : "FAIL", kGradCheckTolerance);
      return ok ? 0 : 2;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
