#pragma once

// End-to-end gradient check of a whole network. The parameter count is far
// too large for full central differences, so each parameter tensor is probed
// at a few random coordinates plus the coordinate of its largest analytic
// gradient.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sensor3d/network.hpp"

namespace sensor3d::testing {

/// Builds a scalar loss from the network output for one context.
using NetworkLoss = std::function<Var<double>(const Var<double>& output)>;

struct NetworkGradReport {
  double worst = 0.0;
  std::string worst_param;
  std::size_t probes = 0;
};

inline double network_loss_value(const Network<double>& net, const std::vector<Tensor<double>>& slices,
                                 const NetworkLoss& loss) {
  Tape<double> tape(false);
  BoundParams<double> p = bind_params(tape, net.params);
  std::vector<Var<double>> xs;
  for (const auto& s : slices) xs.push_back(tape.borrowed_constant(s));
  return loss(forward_context(net, p, xs)).value()[0];
}

inline NetworkGradReport network_gradient_check(Network<double> net, const std::vector<Tensor<double>>& slices,
                                                const NetworkLoss& loss, std::size_t random_probes = 4,
                                                double step = 1e-5, std::uint64_t seed = 17) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    BoundParams<double> p = bind_params(tape, net.params);
    std::vector<Var<double>> xs;
    for (const auto& s : slices) xs.push_back(tape.borrowed_constant(s));
    tape.backward(loss(forward_context(net, p, xs)));
    for (const auto& v : p.vars) {
      const Tensor<double>* g = tape.grad(v);
      analytic.push_back(g ? *g : Tensor<double>::zeros(v.shape()));
    }
  }
  NetworkGradReport report;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < net.params.size(); ++k) {
    Tensor<double>& param = net.params[k].value;
    const Tensor<double>& g = analytic[k];
    std::size_t argmax = 0;
    double scale = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (std::abs(g[i]) > scale) scale = std::abs(g[i]), argmax = i;
    std::vector<std::size_t> coords{argmax};
    std::uniform_int_distribution<std::size_t> pick(0, param.size() - 1);
    for (std::size_t r = 0; r < random_probes; ++r) coords.push_back(pick(rng));
    std::vector<double> fd = finite_difference_at([&] { return network_loss_value(net, slices, loss); }, param, coords, step);
    double err = 0.0;
    for (std::size_t c = 0; c < coords.size(); ++c) err = std::max(err, std::abs(g[coords[c]] - fd[c]));
    const double rel = scale > 0.0 ? err / scale : err;
    report.probes += coords.size();
    if (rel > report.worst) {
      report.worst = rel;
      report.worst_param = net.params[k].name;
    }
  }
  return report;
}

}  // namespace sensor3d::testing
