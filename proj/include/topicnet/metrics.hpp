#pragma once

// Saliency evaluation: MAE, max/mean F-measure, max E-measure and S-measure, with per-group
// then across-group aggregation.
//
// Thresholds are t = k / 255 for k = 1..256 and binarise as B = [M >= t]. The all-ones
// binarisation at t = 0 is not among them, so a map that is positive only off the mask scores
// F = 0; the last threshold lies above 1 and gives an empty B.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "topicnet/tensor.hpp"

namespace topicnet::metrics {

inline constexpr double kBetaSquared = 0.3;
inline constexpr std::size_t kThresholds = 256;

double mae(const Tensor& map, const Tensor& mask);

struct FMeasures {
  double f_mu = 0.0;     // max over thresholds
  double f_gamma = 0.0;  // mean over thresholds
};

// Throws ConfigError when the mask has no foreground (recall undefined).
FMeasures f_measures(const Tensor& map, const Tensor& mask);
double e_measure_max(const Tensor& map, const Tensor& mask);
// Structure measure with alpha = 0.5. Maps and masks are [H,W] or [1,H,W].
double s_measure(const Tensor& map, const Tensor& mask);

struct Scores {
  double f_mu = 0.0;
  double mae = 0.0;
  double f_gamma = 0.0;
  double e_mu = 0.0;
  double s_alpha = 0.0;
};

struct ImageScores {
  Scores scores;
  bool has_f = true;  // false when the mask is empty
};

ImageScores score_image(const Tensor& map, const Tensor& mask);

struct GroupScores {
  std::string name;
  Scores scores;
  std::size_t images = 0;
};

struct MetricReport {
  std::vector<GroupScores> groups;
  Scores overall;
  std::vector<std::string> warnings;

  std::string csv() const;
};

// Averages image scores within each group, then group scores across groups. Images with an
// empty mask do not contribute to F_mu / F_gamma.
MetricReport aggregate(const std::vector<std::string>& group_names,
                       const std::vector<std::vector<ImageScores>>& per_image);

// gt_dir holds group directories with gt/imgMM.pgm; predictions live at pred_dir/<group>/imgMM.pgm.
MetricReport evaluate_dataset(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir);

}  // namespace topicnet::metrics
