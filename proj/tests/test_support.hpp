#pragma once

// Shared helpers for model-level gradient checks: analytic gradients come
// from the library's backward pass, numeric gradients from loss values only
// (oracles::fd_gradient), so the two sides stay independent.

#include <functional>
#include <vector>

#include "afan/model.hpp"
#include "afan/rng.hpp"
#include "afan/tensor.hpp"
#include "oracles.hpp"

namespace test_support {

using LossBuilder = std::function<afan::Tensor(afan::SplitModel&)>;

// Analytic d(loss)/d(theta) flattened in declaration order.
inline std::vector<double> analytic_param_grad(afan::SplitModel& model, const LossBuilder& build) {
  model.zero_grads();
  afan::Tensor loss = build(model);
  afan::backward(loss);
  std::vector<double> g;
  for (auto& p : model.parameters()) {
    if (p.tensor.has_grad()) {
      const auto& pg = p.tensor.grad();
      g.insert(g.end(), pg.begin(), pg.end());
    } else {
      g.insert(g.end(), static_cast<size_t>(p.tensor.numel()), 0.0);
    }
  }
  return g;
}

// Max over parameter coordinates of |analytic - central diff| / max(1,|cd|).
inline double param_grad_max_rel_error(afan::SplitModel& model, const LossBuilder& build,
                                       double h = 1e-4) {
  const std::vector<double> theta = model.flat_parameters();
  const std::vector<double> analytic = analytic_param_grad(model, build);
  auto value_at = [&](const std::vector<double>& p) {
    model.set_flat_parameters(p);
    const double v = build(model).item();
    return v;
  };
  const std::vector<double> numeric = oracles::fd_gradient(value_at, theta, h);
  model.set_flat_parameters(theta);
  double max_rel = 0.0;
  for (size_t i = 0; i < numeric.size(); ++i) {
    const double err = std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(numeric[i]));
    max_rel = std::max(max_rel, err);
  }
  return max_rel;
}

inline afan::Tensor random_batch(afan::Shape shape, uint64_t seed, double lo = 0.0, double hi = 1.0) {
  afan::Rng rng(seed);
  int64_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return afan::Tensor::from_values(std::move(shape), std::move(v), false);
}

inline std::vector<int> random_labels(int64_t n, int classes, uint64_t seed) {
  afan::Rng rng(seed);
  std::vector<int> y(static_cast<size_t>(n));
  for (auto& l : y) l = static_cast<int>(rng.uniform_int(classes));
  return y;
}

}  // namespace test_support
