#pragma once

// Shared helpers for the unit suites: random tensors and a gradient checker
// that compares tape gradients with central differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "sensor3d/autodiff.hpp"

namespace sensor3d::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

using LossBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline double evaluate_loss(const LossBuilder& build, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape(false);
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.borrowed_constant(t));
  return build(tape, vars).value()[0];
}

/// Per input tensor: max |analytic - central difference| divided by the max
/// |analytic| of that tensor. Returns the largest over all inputs.
inline double gradient_check(const LossBuilder& build, std::vector<Tensor<double>> inputs, double step = 1e-5) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  tape.backward(build(tape, vars));
  std::vector<Tensor<double>> analytic;
  for (const auto& v : vars) {
    const Tensor<double>* g = tape.grad(v);
    analytic.push_back(g ? *g : Tensor<double>::zeros(v.shape()));
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double> fd = finite_difference_grad(
        [&](const Tensor<double>& probe) {
          std::vector<Tensor<double>> perturbed = inputs;
          perturbed[k] = probe;
          return evaluate_loss(build, perturbed);
        },
        inputs[k], step);
    double scale = 0.0, err = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
      scale = std::max(scale, std::abs(analytic[k][i]));
      err = std::max(err, std::abs(analytic[k][i] - fd[i]));
    }
    worst = std::max(worst, scale > 0 ? err / scale : err);
  }
  return worst;
}

/// sum(x . weights) for fixed random weights, so every output element
/// carries a distinct upstream gradient.
inline Var<double> weighted_sum(const Var<double>& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor<double> w = random_tensor(x.shape(), rng);
  return sum(mul(x, x.tape().constant(std::move(w))));
}

}  // namespace sensor3d::testing
