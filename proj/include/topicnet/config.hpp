#pragma once

// Run configuration: key=value files with "#" comments, overridable key by key.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "topicnet/data.hpp"

namespace topicnet {

struct TrainConfig {
  // Data.
  std::string data_dir = "data";
  std::size_t image_size = 64;
  std::size_t images_per_group = 4;  // N
  std::size_t categories = 12;
  std::size_t train_groups = 8;
  std::size_t val_groups = 4;
  bool augment = true;

  // Model.
  std::array<std::size_t, 5> channels{16, 32, 64, 64, 64};
  std::size_t lateral_dim = 64;  // D
  std::size_t working_res = 7;   // S
  std::string resize_mode = "bilinear";
  bool igp_softmax_before_mean = false;
  bool use_igp = true;
  bool use_gpp = true;
  bool use_clm = true;

  // Objective.
  std::size_t groups_per_step = 2;  // M
  std::vector<int> positive_layers{3, 4, 5};
  std::vector<int> negative_layers{3, 4, 5};
  double tau = 0.07;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  bool dice_factor_two = false;

  // Optimisation.
  double lr = 1e-4;
  std::size_t epochs = 30;
  std::size_t steps_per_epoch = 16;
  std::uint64_t seed = 1;

  void set(const std::string& key, const std::string& value);
  void validate() const;

  // Canonical "key=value" lines for every field, in a fixed order.
  std::string echo() const;
  // FNV-1a over the code version tag and echo().
  std::uint64_t hash() const;

  data::DatasetConfig dataset() const;
  // Layers that receive lateral projections and co-attention gates.
  std::vector<int> gated_layers(bool training) const;
};

TrainConfig load_config(const std::filesystem::path& path);
// Parses "key=value" overrides in order; the last one wins.
void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& overrides);

std::uint64_t fnv1a(const std::string& bytes);

inline constexpr const char* kCodeVersion = "topicnet-0.1";

}  // namespace topicnet
