#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "topicnet/tensor.hpp"

namespace topicnet {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;
};

// Bias-corrected Adam. Moment buffers are created lazily on the first step and are matched
// to parameters by position.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamOptions options) : options_(options) {}

  void step(std::span<Tensor> params, std::span<const Tensor> grads) {
    if (params.size() != grads.size()) throw ShapeError("adam: params/grads count mismatch");
    if (state_.m.empty()) {
      for (const Tensor& p : params) {
        state_.m.emplace_back(p.shape(), 0.0);
        state_.v.emplace_back(p.shape(), 0.0);
      }
    }
    if (state_.m.size() != params.size()) throw ShapeError("adam: parameter count changed");
    ++state_.t;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = params[k];
      const Tensor& g = grads[k];
      if (p.shape() != g.shape() || p.shape() != state_.m[k].shape())
        throw ShapeError("adam: shape mismatch for parameter " + std::to_string(k));
      Tensor& m = state_.m[k];
      Tensor& v = state_.v[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
      }
    }
  }

  const AdamState& state() const { return state_; }
  const AdamOptions& options() const { return options_; }

 private:
  AdamOptions options_;
  AdamState state_;
};

}  // namespace topicnet
