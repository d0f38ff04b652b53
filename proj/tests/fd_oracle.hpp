#pragma once

// Central finite-difference oracle for unit tests. Only forward values are used, so the
// oracle stays independent of every backward rule it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "topicnet/autograd.hpp"

namespace topicnet::testing {

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

// Max relative error |ad - fd| / max(|ad|, |fd|, floor) over every input coordinate.
inline double max_grad_rel_error(const ScalarFn& f, const std::vector<Tensor>& inputs,
                                 double h = 1e-5, double floor = 1e-8) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  tape.backward(f(tape, vars));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor& ad = tape.grad(vars[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      const double fd = (evaluate(f, plus) - evaluate(f, minus)) / (2.0 * h);
      const double denom = std::max({std::abs(ad[i]), std::abs(fd), floor});
      worst = std::max(worst, std::abs(ad[i] - fd) / denom);
    }
  }
  return worst;
}

// Weighted sum with fixed pseudo-random weights, so every output element gets a distinct
// upstream gradient.
inline Var weighted_sum(Tape& tape, const Var& y, unsigned seed = 7) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(y.shape(), rng, 0.5, 1.5);
  return sum_all(mul(y, tape.constant(w)));
}

}  // namespace topicnet::testing
