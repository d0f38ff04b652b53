#include "topicnet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "topicnet/adam.hpp"
#include "topicnet/netpbm.hpp"

namespace topicnet {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSamplerTag = 0x5A3F;
constexpr std::uint64_t kAugmentTag = 0xA06E;
constexpr std::uint64_t kGradCheckTag = 0x6C4E;

bool finite(const std::vector<Tensor>& ts) {
  return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return t.all_finite(); });
}

void check_manifest(const TrainConfig& cfg, const data::Manifest& m) {
  if (m.config.image_size != cfg.image_size)
    throw ConfigError("dataset image_size " + std::to_string(m.config.image_size) + " does not match config " +
                      std::to_string(cfg.image_size));
  if (m.config.images_per_group != cfg.images_per_group)
    throw ConfigError("dataset images_per_group " + std::to_string(m.config.images_per_group) +
                      " does not match config " + std::to_string(cfg.images_per_group));
}

std::string runlog_text(const std::vector<EpochRecord>& rows) {
  std::string s = std::string(kRunLogHeader) + "\n";
  for (const auto& r : rows) s += runlog_row(r);
  return s;
}

}  // namespace

std::string runlog_row(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.8f,%.8f,%.8f,%.8f,%.8f,%.3f\n", r.epoch, r.loss, r.loss_cl, r.loss_s, r.val_fmu,
                r.val_mae, r.seconds);
  return buf;
}

std::vector<std::size_t> sample_groups(const std::vector<data::ImageGroup>& groups, std::size_t m, Rng& rng) {
  std::vector<std::size_t> order(groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::size_t> picked;
  std::set<std::size_t> cats;
  for (std::size_t i : order) {
    if (picked.size() == m) break;
    if (cats.insert(groups[i].category).second) picked.push_back(i);
  }
  if (picked.size() < m)
    throw ConfigError("sampler: only " + std::to_string(picked.size()) + " distinct categories available, need " +
                      std::to_string(m));
  return picked;
}

GroupInput group_input(const data::ImageGroup& g, const data::ChannelStats& stats) {
  std::vector<Tensor> imgs;
  for (const Tensor& im : g.images) imgs.push_back(data::normalize(im, stats));
  GroupInput in{data::stack(imgs), Tensor()};
  if (!g.masks.empty() && g.masks.size() == g.images.size()) in.masks = data::stack(g.masks);
  return in;
}

std::vector<Tensor> predict_group(const ParameterSet& params, const TrainConfig& cfg, const data::ImageGroup& g,
                                  const data::ChannelStats& stats) {
  Tape tape;
  BoundParameters bound(tape, params, false);
  GroupInput in = group_input(g, stats);
  in.masks = Tensor();
  const ForwardOutput out = forward_topicnet(tape, bound, {in}, cfg, Mode::kInfer);
  const Tensor& maps = out.maps.front().value();
  const Shape& s = maps.shape();
  const std::size_t plane = s[2] * s[3];
  std::vector<Tensor> result;
  for (std::size_t n = 0; n < s[0]; ++n) {
    Tensor m(Shape{1, s[2], s[3]});
    for (std::size_t i = 0; i < plane; ++i) m[i] = netpbm::dequantize(netpbm::quantize(maps[n * plane + i]));
    result.push_back(std::move(m));
  }
  return result;
}

metrics::MetricReport evaluate_groups(const ParameterSet& params, const TrainConfig& cfg,
                                      const std::vector<data::ImageGroup>& groups, const data::ChannelStats& stats) {
  std::vector<std::string> names;
  std::vector<std::vector<metrics::ImageScores>> scores;
  for (const auto& g : groups) {
    const std::vector<Tensor> maps = predict_group(params, cfg, g, stats);
    names.push_back(g.dir_name());
    auto& row = scores.emplace_back();
    for (std::size_t n = 0; n < maps.size(); ++n) row.push_back(metrics::score_image(maps[n], g.masks.at(n)));
  }
  return metrics::aggregate(names, scores);
}

void infer_split(const ParameterSet& params, const TrainConfig& cfg, const fs::path& data_root, const std::string& split,
                 const fs::path& pred_dir) {
  const data::Manifest m = data::read_manifest(data_root);
  check_manifest(cfg, m);
  for (const std::string& name : m.split(split)) {
    const data::ImageGroup g = data::load_group(data_root / split / name);
    const std::vector<Tensor> maps = predict_group(params, cfg, g, m.stats);
    const fs::path dir = pred_dir / name;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(dir.string() + ": cannot create directory: " + ec.message());
    for (std::size_t n = 0; n < maps.size(); ++n) {
      char file[32];
      std::snprintf(file, sizeof file, "img%02zu.pgm", n);
      netpbm::write_pgm(dir / file, maps[n]);
    }
  }
}

TrainResult train(const TrainConfig& cfg, const fs::path& out_dir, const TrainHooks& hooks) {
  cfg.validate();
  const fs::path root(cfg.data_dir);
  const data::Manifest manifest = data::read_manifest(root);
  check_manifest(cfg, manifest);
  const std::vector<data::ImageGroup> train_groups = data::load_split(root, manifest, "train");
  const std::vector<data::ImageGroup> val_groups = data::load_split(root, manifest, "val");
  if (train_groups.size() < cfg.groups_per_step)
    throw ConfigError("train split has " + std::to_string(train_groups.size()) + " groups, need " +
                      std::to_string(cfg.groups_per_step));

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir.string() + ": cannot create directory: " + ec.message());
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(cfg.hash()));
  netpbm::write_file(out_dir / "config.txt", cfg.echo() + "code_version=" + kCodeVersion + "\nhash=" + hash + "\n");

  TrainResult result;
  result.params = init_model(cfg, cfg.seed);
  AdamOptimizer adam({.lr = cfg.lr});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step) {
      Rng srng = Rng::keyed(cfg.seed, {kSamplerTag, epoch, step});
      const std::vector<std::size_t> picked = sample_groups(train_groups, cfg.groups_per_step, srng);
      std::vector<GroupInput> inputs;
      for (std::size_t gi = 0; gi < picked.size(); ++gi) {
        const data::ImageGroup& g = train_groups[picked[gi]];
        std::vector<Tensor> imgs, masks;
        for (std::size_t n = 0; n < g.images.size(); ++n) {
          if (cfg.augment) {
            Rng arng = Rng::keyed(cfg.seed, {kAugmentTag, epoch, step, gi, n});
            data::Augmented a = data::augment(g.images[n], g.masks[n], manifest.stats, arng);
            imgs.push_back(std::move(a.image));
            masks.push_back(std::move(a.mask));
          } else {
            imgs.push_back(data::normalize(g.images[n], manifest.stats));
            masks.push_back(g.masks[n]);
          }
        }
        inputs.push_back({data::stack(imgs), data::stack(masks)});
      }

      const std::string where = "epoch " + std::to_string(epoch) + " step " + std::to_string(step);
      std::vector<Tensor> grads;
      try {
        Tape tape;
        BoundParameters bound(tape, result.params, true);
        const ForwardOutput out = forward_topicnet(tape, bound, inputs, cfg, Mode::kTrain);
        if (!std::isfinite(out.report.l)) throw NumericError("non-finite loss");
        tape.backward(out.loss);
        grads = bound.gradients();
        if (!finite(grads)) throw NumericError("non-finite gradient");
        rec.loss += out.report.l;
        rec.loss_cl += out.report.l_cl;
        rec.loss_s += out.report.l_s;
      } catch (const NumericError& e) {
        netpbm::write_file(out_dir / "runlog.csv", runlog_text(result.epochs));
        throw NumericError("training aborted at " + where + ": " + e.what() +
                           "; the last good checkpoint is kept in " + (out_dir / "checkpoint.bin").string());
      }
      adam.step(result.params.values(), grads);
      if (hooks.after_step) hooks.after_step(epoch, step, result.params);
    }
    const double steps = static_cast<double>(cfg.steps_per_epoch);
    rec.loss /= steps;
    rec.loss_cl /= steps;
    rec.loss_s /= steps;
    if (!val_groups.empty()) {
      const metrics::MetricReport vr = evaluate_groups(result.params, cfg, val_groups, manifest.stats);
      rec.val_fmu = vr.overall.f_mu;
      rec.val_mae = vr.overall.mae;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(rec);
    save_checkpoint(result.params, out_dir / "checkpoint.bin");
    netpbm::write_file(out_dir / "runlog.csv", runlog_text(result.epochs));
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  return result;
}

// ---- gradient check ----

TrainConfig tiny_config() {
  TrainConfig c;
  c.image_size = 16;
  c.images_per_group = 2;
  c.categories = 4;
  c.train_groups = 2;
  c.val_groups = 0;
  c.channels = {4, 6, 8, 8, 8};
  c.lateral_dim = 8;
  c.working_res = 3;
  c.groups_per_step = 2;
  c.augment = false;
  return c;
}

std::string GradCheckReport::text() const {
  std::ostringstream o;
  char buf[256];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%-22s coords=%-4zu max_rel_error=%.3e ad=%+.6e fd=%+.6e\n", e.name.c_str(), e.coords,
                  e.max_rel_error, e.analytic, e.numeric);
    o << buf;
  }
  std::snprintf(buf, sizeof buf, "tensors=%zu loss_cl=%.6f loss_s=%.6f max_rel_error=%.3e\n", entries.size(), loss_cl,
                loss_s, max_rel_error);
  o << buf;
  return o.str();
}

GradCheckReport grad_check(const TrainConfig& cfg, std::uint64_t seed, double h, std::size_t coords) {
  cfg.validate();
  const data::DatasetConfig dcfg = cfg.dataset();
  std::vector<data::ImageGroup> groups;
  for (std::size_t g = 0; g < cfg.groups_per_step; ++g) groups.push_back(data::generate_group(dcfg, seed, g));
  const data::ChannelStats stats = data::compute_stats(groups);
  std::vector<GroupInput> inputs;
  for (const auto& g : groups) inputs.push_back(group_input(g, stats));

  ParameterSet params = init_model(cfg, seed);

  BranchRecording recording;
  GradCheckReport report;
  std::vector<Tensor> analytic;
  {
    BranchScope scope(recording, BranchScope::Mode::kRecord);
    Tape tape;
    BoundParameters bound(tape, params, true);
    const ForwardOutput out = forward_topicnet(tape, bound, inputs, cfg, Mode::kTrain);
    tape.backward(out.loss);
    analytic = bound.gradients();
    report.loss_cl = out.report.l_cl;
    report.loss_s = out.report.l_s;
  }
  auto loss_at = [&](const ParameterSet& p) {
    BranchScope scope(recording, BranchScope::Mode::kReplay);
    Tape tape;
    BoundParameters bound(tape, p, false);
    return forward_topicnet(tape, bound, inputs, cfg, Mode::kTrain).report.l;
  };

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& t = params.values()[k];
    std::vector<std::size_t> idx(t.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng pick = Rng::keyed(seed, {kGradCheckTag, 1, k});
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[pick.below(i)]);
    idx.resize(std::min(coords, idx.size()));

    GradCheckEntry entry{params.names()[k], idx.size(), 0.0};
    for (std::size_t i : idx) {
      const double orig = t[i];
      auto central = [&](double step) {
        t[i] = orig + step;
        const double lp = loss_at(params);
        t[i] = orig - step;
        const double lm = loss_at(params);
        t[i] = orig;
        return (lp - lm) / (2.0 * step);
      };
      // Richardson extrapolation over central differences at h, h/2, h/4 cancels the h^2 and
      // h^4 terms; the exp(cos / tau) terms make the plain O(h^2) error too large at tau = 0.07.
      const double d1 = central(h), d2 = central(0.5 * h), d4 = central(0.25 * h);
      const double e2 = (4.0 * d2 - d1) / 3.0, e4 = (4.0 * d4 - d2) / 3.0;
      const double fd = (16.0 * e4 - e2) / 15.0;
      const double ad = analytic[k][i];
      const double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), kGradCheckFloor});
      if (rel >= entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.analytic = ad;
        entry.numeric = fd;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace topicnet
