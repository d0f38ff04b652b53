#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <map>
#include <set>

#include "topicnet/data.hpp"
#include "topicnet/netpbm.hpp"

namespace topicnet::data {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) : path_(fs::temp_directory_path() / ("topicnet_" + tag)) {
    fs::remove_all(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = netpbm::read_file(e.path());
  return files;
}

TEST(Netpbm, WhitePixelAndQuantization) {
  const std::string white = std::string("P5\n1 1\n255\n") + static_cast<char>(255);
  Tensor t = netpbm::decode(white);
  ASSERT_EQ(t.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(t[0], 1.0);
  EXPECT_EQ(netpbm::encode_pgm(t), white);
  EXPECT_EQ(netpbm::quantize(0.5), 128);
  EXPECT_DOUBLE_EQ(netpbm::dequantize(128), 128.0 / 255.0);
  EXPECT_EQ(netpbm::quantize(-0.2), 0);
  EXPECT_EQ(netpbm::quantize(1.7), 255);
}

TEST(Netpbm, ColourLayoutRoundTrip) {
  Tensor img(Shape{3, 2, 2});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i * 20) / 255.0;
  const std::string bytes = netpbm::encode_ppm(img);
  EXPECT_EQ(bytes.substr(0, 11), "P6\n2 2\n255\n");
  // Interleaved RGB: pixel 0 is (R0, G0, B0) from the three planes.
  EXPECT_EQ(static_cast<unsigned char>(bytes[11]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 80);
  EXPECT_EQ(static_cast<unsigned char>(bytes[13]), 160);
  Tensor back = netpbm::decode(bytes);
  EXPECT_TRUE(back == img);
  EXPECT_EQ(netpbm::encode_ppm(back), bytes);
}

TEST(Netpbm, MalformedInputsReportOffsets) {
  auto message = [](const std::string& bytes) {
    try {
      netpbm::decode(bytes);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("P7\n1 1\n255\n\x01").find("byte offset 0"), std::string::npos);
  EXPECT_NE(message("P5\n1 x\n255\n\x01").find("byte offset 5"), std::string::npos);
  EXPECT_NE(message("P5\n2 2\n255\n\x01").find("byte offset 11"), std::string::npos);
  EXPECT_NE(message("P5\n1 1\n65535\n\x01\x01").find("maxval"), std::string::npos);
  EXPECT_NE(message("P5\n1 1\n255\n\x01\x02").find("trailing"), std::string::npos);
  EXPECT_THROW(netpbm::read("/nonexistent/file.pgm"), IoError);
}

TEST(Generator, GroupInvariants) {
  DatasetConfig cfg;
  for (std::size_t g = 0; g < 12; ++g) {
    ImageGroup group = generate_group(cfg, 42, g);
    EXPECT_EQ(group.category, g % 12);
    ASSERT_EQ(group.images.size(), 4u);
    for (std::size_t n = 0; n < 4; ++n) {
      const Tensor& m = group.masks[n];
      ASSERT_EQ(m.shape(), (Shape{1, 64, 64}));
      ASSERT_EQ(group.images[n].shape(), (Shape{3, 64, 64}));
      double fg = 0;
      for (double v : m.data()) {
        ASSERT_TRUE(v == 0.0 || v == 1.0);
        fg += v;
      }
      fg /= m.size();
      EXPECT_GE(fg, 0.02);
      EXPECT_LE(fg, 0.5);
      for (double v : group.images[n].data()) ASSERT_EQ(netpbm::dequantize(netpbm::quantize(v)), v);
      const auto& d = group.distractors[n];
      EXPECT_LE(d.size(), 2u);
      if (n % 2 == 0) EXPECT_GE(d.size(), 1u);
      for (std::size_t c : d) EXPECT_NE(c, group.category);
    }
  }
}

TEST(Generator, DeterministicAndSeedSensitive) {
  DatasetConfig cfg;
  ImageGroup a = generate_group(cfg, 7, 3), b = generate_group(cfg, 7, 3), c = generate_group(cfg, 8, 3);
  for (std::size_t n = 0; n < 4; ++n) {
    EXPECT_TRUE(a.images[n] == b.images[n]);
    EXPECT_TRUE(a.masks[n] == b.masks[n]);
  }
  EXPECT_FALSE(a.images[0] == c.images[0]);
}

TEST(Generator, RejectsBadConfig) {
  DatasetConfig cfg;
  cfg.image_size = 40;
  EXPECT_THROW(generate_group(cfg, 1, 0), ConfigError);
  cfg = {};
  cfg.categories = 3;
  EXPECT_THROW(generate_group(cfg, 1, 0), ConfigError);
}

TEST(Dataset, TreeIsByteIdenticalAcrossRuns) {
  TempDir a("data_a"), b("data_b");
  DatasetConfig cfg;
  const auto t0 = std::chrono::steady_clock::now();
  Manifest m = generate_dataset(cfg, 5, a.path());
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(seconds, 10.0);
  generate_dataset(cfg, 5, b.path());
  const auto sa = snapshot(a.path()), sb = snapshot(b.path());
  EXPECT_EQ(sa.size(), 1u + 12u * 4u * 2u);
  EXPECT_TRUE(sa == sb);
  EXPECT_TRUE(fs::exists(a.path() / "train" / "group000_cat0" / "img" / "img00.ppm"));
  EXPECT_TRUE(fs::exists(a.path() / "val" / "group011_cat11" / "gt" / "img03.pgm"));

  // Every stored file re-encodes to the same bytes.
  for (const auto& [rel, bytes] : sa) {
    if (rel == "manifest.txt") continue;
    Tensor t = netpbm::decode(bytes);
    EXPECT_EQ(t.shape()[0] == 3 ? netpbm::encode_ppm(t) : netpbm::encode_pgm(t), bytes) << rel;
  }

  // Disjoint splits.
  std::set<std::string> train(m.train.begin(), m.train.end());
  for (const auto& v : m.val) EXPECT_EQ(train.count(v), 0u);
  EXPECT_EQ(m.train.size(), 8u);
  EXPECT_EQ(m.val.size(), 4u);

  Manifest back = read_manifest(a.path());
  EXPECT_EQ(back.train, m.train);
  EXPECT_EQ(back.val, m.val);
  EXPECT_EQ(back.stats.mean, m.stats.mean);
  EXPECT_EQ(back.stats.std, m.stats.std);
  EXPECT_EQ(back.seed, 5u);
  EXPECT_EQ(encode_manifest(back), sa.at("manifest.txt"));
}

TEST(Dataset, NormalizedStatisticsOverFullSet) {
  TempDir dir("data_stats");
  generate_dataset({}, 9, dir.path());
  Manifest m = read_manifest(dir.path());
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (const char* split : {"train", "val"})
    for (const auto& g : load_split(dir.path(), m, split))
      for (const auto& img : g.images) {
        Tensor z = normalize(img, m.stats);
        const std::size_t plane = z.size() / 3;
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t i = 0; i < plane; ++i) {
            sum[c] += z[c * plane + i];
            sq[c] += z[c * plane + i] * z[c * plane + i];
          }
        count += plane;
      }
  for (std::size_t c = 0; c < 3; ++c) {
    const double mean = sum[c] / count;
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(std::sqrt(sq[c] / count - mean * mean), 1.0, 1e-6);
  }
}

TEST(Dataset, UnwritableRootThrowsIoError) {
  TempDir dir("data_blocked");
  fs::create_directories(dir.path());
  netpbm::write_file(dir.path() / "train", "not a directory");
  EXPECT_THROW(generate_dataset({}, 1, dir.path()), IoError);
}

TEST(Augment, FlipIsInvolution) {
  ImageGroup g = generate_group({}, 3, 0);
  EXPECT_TRUE(hflip(hflip(g.images[0])) == g.images[0]);
  EXPECT_TRUE(hflip(hflip(g.masks[0])) == g.masks[0]);
  EXPECT_FALSE(hflip(g.images[0]) == g.images[0]);
}

TEST(Augment, ZeroRotationIsIdentity) {
  ImageGroup g = generate_group({}, 3, 1);
  EXPECT_TRUE(rotate_bilinear(g.images[0], 0.0) == g.images[0]);
  EXPECT_TRUE(rotate_nearest(g.masks[0], 0.0) == g.masks[0]);
}

TEST(Augment, MaskStaysBinaryAndAlignedWithImage) {
  ImageGroup g = generate_group({}, 4, 2);
  ChannelStats stats;
  for (std::uint64_t k = 0; k < 20; ++k) {
    Rng rng = Rng::keyed(11, {k});
    Augmented a = augment(g.images[k % 4], g.masks[k % 4], stats, rng);
    EXPECT_LE(std::abs(a.degrees), 15.0);
    double fg = 0;
    for (double v : a.mask.data()) {
      ASSERT_TRUE(v == 0.0 || v == 1.0);
      fg += v;
    }
    EXPECT_GT(fg, 0);
  }
}

TEST(Augment, FlipDecisionRateNearHalfAndDeterministic) {
  ImageGroup g = generate_group({}, 4, 2);
  int flips = 0;
  for (std::uint64_t k = 0; k < 400; ++k) {
    Rng r1 = Rng::keyed(5, {k}), r2 = Rng::keyed(5, {k});
    Augmented a = augment(g.images[0], g.masks[0], {}, r1), b = augment(g.images[0], g.masks[0], {}, r2);
    if (k < 5) {
      EXPECT_TRUE(a.image == b.image);
      EXPECT_TRUE(a.mask == b.mask);
    }
    flips += a.flipped;
  }
  EXPECT_GT(flips, 150);
  EXPECT_LT(flips, 250);
}

TEST(Augment, StackAddsBatchAxis) {
  ImageGroup g = generate_group({}, 4, 2);
  Tensor s = stack(g.images);
  EXPECT_EQ(s.shape(), (Shape{4, 3, 64, 64}));
  EXPECT_EQ(s[3 * 3 * 64 * 64 + 5], g.images[3][5]);
}

}  // namespace
}  // namespace topicnet::data
