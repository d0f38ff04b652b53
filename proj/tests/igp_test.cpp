#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd_oracle.hpp"
#include "topicnet/igp.hpp"

namespace topicnet {
namespace {

using testing::random_tensor;

// Naive loop reference for the whole block on plain arrays.
struct NaiveIgp {
  std::size_t n, d, s;
  const Tensor& x;
  const ParameterSet& p;

  double proj(const std::string& name, std::size_t out, std::size_t img, std::size_t pix) const {
    const Tensor& w = p.get("igp." + name + ".w");
    const Tensor& b = p.get("igp." + name + ".b");
    double acc = b[out];
    for (std::size_t c = 0; c < d; ++c) acc += w[out * d + c] * x[(img * d + c) * s * s + pix];
    return acc;
  }

  double affinity(const std::string& a, const std::string& b, std::size_t n1, std::size_t p1, std::size_t n2,
                  std::size_t p2) const {
    double acc = 0.0;
    for (std::size_t j = 0; j < d / 2; ++j) acc += proj(a, j, n1, p1) * proj(b, j, n2, p2);
    return acc;
  }

  std::vector<double> reduced(const std::string& a, const std::string& b) const {
    const std::size_t P = s * s;
    std::vector<double> out(P * P * n);
    for (std::size_t p1 = 0; p1 < P; ++p1)
      for (std::size_t q = 0; q < P; ++q)
        for (std::size_t n1 = 0; n1 < n; ++n1) {
          double best = -INFINITY;
          for (std::size_t n2 = 0; n2 < n; ++n2) best = std::max(best, affinity(a, b, n1, p1, n2, q));
          out[(p1 * P + q) * n + n1] = best;
        }
    return out;
  }

  Tensor run() const {
    const std::size_t P = s * s;
    auto g = reduced("g", "g");
    auto tp = reduced("theta", "phi");
    // softmax over q for each (p, n2)
    std::vector<double> tp_hat(tp.size());
    for (std::size_t p1 = 0; p1 < P; ++p1)
      for (std::size_t n2 = 0; n2 < n; ++n2) {
        double mx = -INFINITY, z = 0.0;
        for (std::size_t q = 0; q < P; ++q) mx = std::max(mx, tp[(p1 * P + q) * n + n2]);
        for (std::size_t q = 0; q < P; ++q) z += std::exp(tp[(p1 * P + q) * n + n2] - mx);
        for (std::size_t q = 0; q < P; ++q) tp_hat[(p1 * P + q) * n + n2] = std::exp(tp[(p1 * P + q) * n + n2] - mx) / z;
      }
    std::vector<double> bar(n * n, 0.0);
    for (std::size_t p1 = 0; p1 < P; ++p1)
      for (std::size_t n1 = 0; n1 < n; ++n1)
        for (std::size_t n2 = 0; n2 < n; ++n2) {
          double a = 0.0;
          for (std::size_t q = 0; q < P; ++q) a += g[(p1 * P + q) * n + n1] * tp_hat[(p1 * P + q) * n + n2];
          bar[n1 * n + n2] += a / static_cast<double>(P);
        }
    Tensor r(x.shape(), 0.0);
    for (std::size_t n1 = 0; n1 < n; ++n1) {
      double mx = -INFINITY, z = 0.0;
      for (std::size_t n2 = 0; n2 < n; ++n2) mx = std::max(mx, bar[n1 * n + n2]);
      for (std::size_t n2 = 0; n2 < n; ++n2) z += std::exp(bar[n1 * n + n2] - mx);
      for (std::size_t n2 = 0; n2 < n; ++n2) {
        const double w = std::exp(bar[n1 * n + n2] - mx) / z;
        for (std::size_t i = 0; i < d * P; ++i) r[n1 * d * P + i] += w * x[n2 * d * P + i];
      }
    }
    return r;
  }
};

ParameterSet igp_params(std::size_t d, std::uint64_t seed) {
  ParameterSet p;
  Rng rng(seed);
  igp::add_params(p, "igp", d, rng);
  // Non-zero biases so they take part in the check.
  std::mt19937_64 r(seed);
  for (const char* b : {"igp.g.b", "igp.theta.b", "igp.phi.b"}) p.get(b) = random_tensor(p.get(b).shape(), r, -0.3, 0.3);
  return p;
}

Tensor run_block(const Tensor& x, const ParameterSet& p, const igp::Options& opt = {}) {
  Tape tape;
  BoundParameters bound(tape, p, false);
  return igp::propagate(tape.constant(x), igp::bind(bound, "igp"), opt).value();
}

TEST(Igp, WorkingResolutionContracts) {
  std::mt19937_64 rng(1);
  Tape tape;
  Var x = tape.constant(random_tensor(Shape{3, 64, 16, 16}, rng));
  EXPECT_EQ(igp::to_working_resolution(x, 7).shape(), (Shape{3, 64, 7, 7}));
  Var same = tape.constant(random_tensor(Shape{1, 4, 7, 7}, rng));
  EXPECT_TRUE(igp::to_working_resolution(same, 7).value() == same.value());
  Var c = tape.constant(Tensor(Shape{1, 2, 16, 16}, 0.375));
  for (auto mode : {igp::ResizeMode::kBilinear, igp::ResizeMode::kArea})
    for (double v : igp::to_working_resolution(c, 7, mode).value().data()) EXPECT_NEAR(v, 0.375, 1e-15);
  EXPECT_THROW(igp::to_working_resolution(x, 1), ConfigError);
}

TEST(Igp, AffinityShapesAndSymmetry) {
  std::mt19937_64 rng(2);
  ParameterSet p = igp_params(8, 3);
  Tape tape;
  BoundParameters bound(tape, p, false);
  auto a = igp::build_pairwise_affinities(tape.constant(random_tensor(Shape{3, 8, 4, 4}, rng)), igp::bind(bound, "igp"));
  EXPECT_EQ(a.a_g.shape(), (Shape{48, 48}));
  EXPECT_EQ(a.a_theta_phi.shape(), (Shape{48, 48}));
  const Tensor& g = a.a_g.value();
  for (std::size_t i = 0; i < 48; ++i) {
    EXPECT_GE(g[i * 48 + i], 0.0);
    for (std::size_t j = 0; j < 48; ++j) ASSERT_EQ(g[i * 48 + j], g[j * 48 + i]);
  }
  EXPECT_EQ(igp::reduce_over_partner_images(a.a_g, 3).shape(), (Shape{16, 16, 3}));
}

TEST(Igp, PartnerMaxHandCase) {
  Tape tape;
  Var a = tape.constant(Tensor(Shape{2, 2}, {1, 4, 2, 3}));
  Tensor r = igp::reduce_over_partner_images(a, 2).value();
  ASSERT_EQ(r.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(r[0], 4.0);
  EXPECT_EQ(r[1], 3.0);
}

TEST(Igp, PartnerMaxSingleImageIsIdentity) {
  std::mt19937_64 rng(4);
  Tape tape;
  Tensor a = random_tensor(Shape{9, 9}, rng);
  Tensor r = igp::reduce_over_partner_images(tape.constant(a), 1).value();
  ASSERT_EQ(r.shape(), (Shape{9, 9, 1}));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(r[i], a[i]);
}

TEST(Igp, PartnerMaxUsesPermutationNotReshape) {
  // Entry (n1*P + p, n2*P + q) holds a code of all four indices; the reduced tensor must read
  // back max over n2 at [p, q, n1].
  const std::size_t n = 3, P = 4;
  Tensor a(Shape{n * P, n * P});
  for (std::size_t n1 = 0; n1 < n; ++n1)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t n2 = 0; n2 < n; ++n2)
        for (std::size_t q = 0; q < P; ++q)
          a[(n1 * P + p) * n * P + n2 * P + q] = 1000.0 * n1 + 100.0 * p + 10.0 * q + ((n2 * 7 + p) % n);
  Tape tape;
  Tensor r = igp::reduce_over_partner_images(tape.constant(a), n).value();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t q = 0; q < P; ++q)
      for (std::size_t n1 = 0; n1 < n; ++n1)
        EXPECT_EQ(r[(p * P + q) * n + n1], 1000.0 * n1 + 100.0 * p + 10.0 * q + (n - 1));
}

TEST(Igp, ComposeMatchesLoopOracle) {
  std::mt19937_64 rng(5);
  for (std::size_t n : {1u, 2u, 3u})
    for (std::size_t s : {1u, 2u, 4u}) {
      const std::size_t P = s * s;
      Tensor g = random_tensor(Shape{P, P, n}, rng, -2, 2);
      Tensor tp = random_tensor(Shape{P, P, n}, rng, -2, 2);
      Tape tape;
      Tensor out = igp::compose_inter_image_similarity(tape.constant(g), tape.constant(tp)).value();
      ASSERT_EQ(out.shape(), (Shape{P, n, n}));
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t n1 = 0; n1 < n; ++n1)
          for (std::size_t n2 = 0; n2 < n; ++n2) {
            double z = 0.0;
            for (std::size_t q = 0; q < P; ++q) z += std::exp(tp[(p * P + q) * n + n2]);
            double want = 0.0;
            for (std::size_t q = 0; q < P; ++q)
              want += g[(p * P + q) * n + n1] * std::exp(tp[(p * P + q) * n + n2]) / z;
            EXPECT_NEAR(out[(p * n + n1) * n + n2], want, 1e-10);
          }
    }
}

TEST(Igp, ComposeUniformNormalizerAverages) {
  std::mt19937_64 rng(6);
  const std::size_t n = 2, P = 4;
  Tensor g = random_tensor(Shape{P, P, n}, rng);
  Tape tape;
  Tensor out = igp::compose_inter_image_similarity(tape.constant(g), tape.constant(Tensor(Shape{P, P, n}, 0.7))).value();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t n1 = 0; n1 < n; ++n1) {
      double mean = 0.0;
      for (std::size_t q = 0; q < P; ++q) mean += g[(p * P + q) * n + n1] / P;
      for (std::size_t n2 = 0; n2 < n; ++n2) EXPECT_NEAR(out[(p * n + n1) * n + n2], mean, 1e-14);
    }
}

TEST(Igp, MixMatchesDoubleLoop) {
  std::mt19937_64 rng(7);
  const std::size_t n = 2, d = 3, s = 2, P = 4;
  Tensor sim = random_tensor(Shape{P, n, n}, rng, -3, 3);
  Tensor x = random_tensor(Shape{n, d, s, s}, rng);
  Tape tape;
  Tensor r = igp::group_semantics_mix(tape.constant(sim), tape.constant(x)).value();
  for (std::size_t a = 0; a < n; ++a) {
    std::vector<double> bar(n, 0.0);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < P; ++p) bar[b] += sim[(p * n + a) * n + b] / P;
    double z = 0.0;
    for (double v : bar) z += std::exp(v);
    for (std::size_t i = 0; i < d * P; ++i) {
      double want = 0.0;
      for (std::size_t b = 0; b < n; ++b) want += std::exp(bar[b]) / z * x[b * d * P + i];
      EXPECT_NEAR(r[a * d * P + i], want, 1e-12);
    }
  }
}

TEST(Igp, WeightsAreRowStochastic) {
  std::mt19937_64 rng(8);
  Tape tape;
  Var sim = tape.constant(random_tensor(Shape{9, 4, 4}, rng, -5, 5));
  for (bool before : {false, true}) {
    Tensor w = igp::inter_image_weights(sim, before).value();
    for (std::size_t i = 0; i < 4; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 4; ++j) row += w[i * 4 + j];
      EXPECT_NEAR(row, 1.0, 1e-12);
    }
  }
}

TEST(Igp, FullBlockMatchesNaiveOracle) {
  std::mt19937_64 rng(9);
  for (std::size_t n : {1u, 2u, 3u}) {
    const std::size_t d = 4, s = 3;
    Tensor x = random_tensor(Shape{n, d, s, s}, rng);
    ParameterSet p = igp_params(d, 10 + n);
    Tensor got = run_block(x, p);
    Tensor want = NaiveIgp{n, d, s, x, p}.run();
    EXPECT_LE(max_abs_diff(got, want), 1e-10) << "N=" << n;
  }
}

TEST(Igp, GroupPermutationEquivariance) {
  std::mt19937_64 rng(10);
  const std::size_t n = 4, d = 8, s = 3, per = d * s * s;
  Tensor x = random_tensor(Shape{n, d, s, s}, rng);
  const std::vector<std::size_t> perm{3, 1, 0, 2};
  Tensor xp(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < per; ++k) xp[i * per + k] = x[perm[i] * per + k];
  ParameterSet p = igp_params(d, 11);
  Tensor r = run_block(x, p), rp = run_block(xp, p);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < per; ++k) worst = std::max(worst, std::abs(rp[i * per + k] - r[perm[i] * per + k]));
  EXPECT_LE(worst, 1e-10);
}

TEST(Igp, IdenticalImagesReturnInput) {
  std::mt19937_64 rng(11);
  const std::size_t n = 3, d = 8, s = 4, per = d * s * s;
  Tensor one = random_tensor(Shape{1, d, s, s}, rng);
  Tensor x(Shape{n, d, s, s});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < per; ++k) x[i * per + k] = one[k];
  for (bool before : {false, true}) {
    igp::Options opt;
    opt.softmax_before_mean = before;
    EXPECT_LE(max_abs_diff(run_block(x, igp_params(d, 12), opt), x), 1e-10);
  }
  // A single image is its own group consensus.
  EXPECT_LE(max_abs_diff(run_block(one, igp_params(d, 13)), one), 1e-15);
}

TEST(Igp, GradientCheck) {
  std::mt19937_64 rng(12);
  const std::size_t n = 2, d = 4, s = 2;
  ParameterSet p = igp_params(d, 14);
  std::vector<Tensor> inputs{random_tensor(Shape{n, d, s, s}, rng)};
  for (const auto& t : p.values()) inputs.push_back(t);
  testing::ScalarFn f = [&](Tape& tape, const std::vector<Var>& in) {
    igp::Weights w{in[1], in[2], in[3], in[4], in[5], in[6]};
    return testing::weighted_sum(tape, igp::propagate(in[0], w, {}));
  };
  EXPECT_LE(testing::max_grad_rel_error(f, inputs), 1e-4);
}

}  // namespace
}  // namespace topicnet
