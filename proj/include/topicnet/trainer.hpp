#pragma once

// Training loop, gradient check and inference over a dataset tree.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "topicnet/config.hpp"
#include "topicnet/data.hpp"
#include "topicnet/metrics.hpp"
#include "topicnet/model.hpp"

namespace topicnet {

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0, loss_cl = 0, loss_s = 0;
  double val_fmu = 0, val_mae = 0;
  double seconds = 0;
};

inline constexpr const char* kRunLogHeader = "epoch,loss,loss_cl,loss_s,val_fmu,val_mae,seconds";
std::string runlog_row(const EpochRecord& r);

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  // Runs after every optimiser step; tests use it to inject faults.
  std::function<void(std::size_t epoch, std::size_t step, ParameterSet&)> after_step;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  ParameterSet params;
};

// Output files in out_dir: config.txt (echo + hash), runlog.csv, checkpoint.bin (rewritten
// after every epoch). A non-finite loss or gradient throws NumericError and leaves the last
// epoch's checkpoint in place.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir, const TrainHooks& hooks = {});

// M distinct categories drawn from the training groups.
std::vector<std::size_t> sample_groups(const std::vector<data::ImageGroup>& groups, std::size_t m, Rng& rng);

// Normalised [N,3,H,W] images and [N,1,H,W] masks of a whole group, no augmentation.
GroupInput group_input(const data::ImageGroup& g, const data::ChannelStats& stats);

// Per-image saliency maps quantised to k/255, one [1,H,W] tensor per image.
std::vector<Tensor> predict_group(const ParameterSet& params, const TrainConfig& cfg, const data::ImageGroup& g,
                                  const data::ChannelStats& stats);

metrics::MetricReport evaluate_groups(const ParameterSet& params, const TrainConfig& cfg,
                                      const std::vector<data::ImageGroup>& groups, const data::ChannelStats& stats);

// Writes pred_dir/<group>/imgMM.pgm for every group of the split.
void infer_split(const ParameterSet& params, const TrainConfig& cfg, const std::filesystem::path& data_root,
                 const std::string& split, const std::filesystem::path& pred_dir);

// ---- gradient check ----

struct GradCheckEntry {
  std::string name;
  std::size_t coords = 0;
  double max_rel_error = 0;
  double analytic = 0, numeric = 0;  // at the worst coordinate
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;  // one per parameter tensor, ParameterSet order
  double max_rel_error = 0;
  double loss_cl = 0, loss_s = 0;
  std::string text() const;
};

// 16x16 images, D = 8, S = 3, N = 2, M = 2, narrow channels.
TrainConfig tiny_config();

// Central differences with step h (Richardson-extrapolated with h/2, h/4) on the total loss,
// branch decisions frozen at the base point. Checks min(coords, size) coordinates of every parameter tensor.
GradCheckReport grad_check(const TrainConfig& cfg, std::uint64_t seed, double h = 1e-3, std::size_t coords = 20);

inline constexpr double kGradCheckTolerance = 1e-4;
// Relative error is |ad - fd| / max(|ad|, |fd|, floor). Below the floor the difference
// quotient is dominated by rounding in L (about |L| * eps / h), so the comparison becomes
// absolute there.
inline constexpr double kGradCheckFloor = 1e-6;

}  // namespace topicnet
