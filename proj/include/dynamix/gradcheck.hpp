#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "dynamix/ops.hpp"

namespace dynamix {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

/// Compare analytic gradients against central differences on a random subset
/// of coordinates. `loss_value` must recompute the scalar loss from the
/// current contents of `params`; the checker perturbs those tensors in place
/// and restores them. Relative error uses max(|analytic|, |numeric|, 1e-8)
/// as the denominator.
template <typename T, typename LossFn>
GradCheckReport grad_check(const std::vector<Tensor<T>*>& params,
                           const std::vector<Tensor<T>>& analytic, LossFn&& loss_value, double eps,
                           std::size_t target_coords, std::uint64_t seed) {
  if (params.size() != analytic.size()) {
    throw contract_error("grad_check: analytic gradient count does not match parameter count");
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p]->size() != analytic[p].size()) {
      throw contract_error("grad_check: gradient shape mismatch at parameter " +
                           std::to_string(p));
    }
    for (std::size_t i = 0; i < params[p]->size(); ++i) coords.emplace_back(p, i);
  }
  Rng rng(seed);
  rng.shuffle(coords);
  if (target_coords > 0 && coords.size() > target_coords) coords.resize(target_coords);

  GradCheckReport report;
  report.coords_checked = coords.size();
  for (const auto& [p, i] : coords) {
    Tensor<T>& theta = *params[p];
    const T saved = theta[i];
    theta[i] = saved + static_cast<T>(eps);
    const double fp = static_cast<double>(loss_value());
    theta[i] = saved - static_cast<T>(eps);
    const double fm = static_cast<double>(loss_value());
    theta[i] = saved;

    const double numeric = (fp - fm) / (2.0 * eps);
    const double analytic_v = static_cast<double>(analytic[p][i]);
    const double denom = std::max({std::abs(analytic_v), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic_v - numeric) / denom;
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  return report;
}

/// Convenience harness: records one forward/backward pass of `build` to get
/// analytic gradients, then runs the finite-difference sweep against
/// value-only replays of the same function.
template <typename T, typename BuildFn>
GradCheckReport grad_check_fn(std::vector<Tensor<T>*> params, BuildFn&& build, double eps,
                              std::size_t target_coords, std::uint64_t seed) {
  for (Tensor<T>* p : params) p->requires_grad = true;

  Tape<T> tape;
  std::vector<Var<T>> vars;
  vars.reserve(params.size());
  for (Tensor<T>* p : params) vars.push_back(tape.leaf(*p));
  Var<T> loss = build(tape, vars);
  tape.backward(loss);
  std::vector<Tensor<T>> analytic;
  analytic.reserve(params.size());
  for (const Var<T>& v : vars) analytic.push_back(tape.grad_of(v));

  auto loss_value = [&]() -> T {
    Tape<T> replay;
    replay.recording = false;
    std::vector<Var<T>> vs;
    vs.reserve(params.size());
    for (Tensor<T>* p : params) vs.push_back(replay.leaf(*p));
    return build(replay, vs).scalar();
  };
  return grad_check(params, analytic, loss_value, eps, target_coords, seed);
}

}  // namespace dynamix
