#pragma once

// Synthetic co-salient groups: every image of a group holds one object of the group's
// category (marked in the mask) plus unmarked distractors from other categories.
//
// On-disk layout: root/manifest.txt and root/<split>/groupNNN_catK/{img/imgMM.ppm, gt/imgMM.pgm}.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "topicnet/rng.hpp"
#include "topicnet/tensor.hpp"

namespace topicnet::data {

struct DatasetConfig {
  std::size_t categories = 12;
  std::size_t train_groups = 8;
  std::size_t val_groups = 4;
  std::size_t images_per_group = 4;
  std::size_t image_size = 64;

  void validate() const;
};

enum class ShapeKind { kDisc, kSquare, kTriangle, kCross, kRing, kBar };
inline constexpr std::size_t kShapeKinds = 6;

ShapeKind category_shape(std::size_t category);
// Hue in [0, 1) shared by every object of the category.
double category_hue(std::size_t category);
std::string category_name(std::size_t category);

struct ImageGroup {
  std::size_t id = 0;
  std::size_t category = 0;
  std::vector<Tensor> images;  // [3,H,W], values k/255
  std::vector<Tensor> masks;   // [1,H,W], values in {0,1}
  std::vector<std::vector<std::size_t>> distractors;  // categories per image (not stored on disk)

  std::string dir_name() const;
};

std::string group_dir_name(std::size_t id, std::size_t category);

// Group g has category g mod C. Deterministic in (seed, g, image index).
ImageGroup generate_group(const DatasetConfig& cfg, std::uint64_t seed, std::size_t group_id);

struct ChannelStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

// Per-channel mean and population std over every pixel of every image.
ChannelStats compute_stats(const std::vector<ImageGroup>& groups);

struct Manifest {
  DatasetConfig config;
  std::uint64_t seed = 0;
  std::vector<std::string> train;  // group directory names
  std::vector<std::string> val;
  ChannelStats stats;

  const std::vector<std::string>& split(const std::string& name) const;
};

// Writes the whole tree (train groups 0..T-1, val groups T..T+V-1) and returns its manifest.
Manifest generate_dataset(const DatasetConfig& cfg, std::uint64_t seed, const std::filesystem::path& root);

std::string encode_manifest(const Manifest& m);
Manifest decode_manifest(const std::string& text, const std::string& source);
Manifest read_manifest(const std::filesystem::path& root);

// Reads one group directory; images and masks are matched by file stem.
ImageGroup load_group(const std::filesystem::path& dir);
std::vector<ImageGroup> load_split(const std::filesystem::path& root, const Manifest& m, const std::string& split);

// Augmentation.
Tensor normalize(const Tensor& image, const ChannelStats& stats);
Tensor hflip(const Tensor& t);
// Rotation about the image centre; bilinear with replicated border.
Tensor rotate_bilinear(const Tensor& t, double degrees);
// Rotation about the image centre; nearest neighbour with zero fill.
Tensor rotate_nearest(const Tensor& t, double degrees);

inline constexpr double kMaxRotationDegrees = 15.0;

struct Augmented {
  Tensor image;
  Tensor mask;
  bool flipped = false;
  double degrees = 0.0;
};

// normalize, then flip with p = 0.5, then rotate by U(-15, 15) degrees; flip and rotation are
// shared by image and mask.
Augmented augment(const Tensor& image, const Tensor& mask, const ChannelStats& stats, Rng& rng);

// [C,H,W] x N -> [N,C,H,W].
Tensor stack(const std::vector<Tensor>& items);

}  // namespace topicnet::data
