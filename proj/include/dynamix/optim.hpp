#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dynamix/weights.hpp"

namespace dynamix {

/// Linear warmup from warmup_start_lr to base_lr, then cosine decay to zero
/// at the final step.
inline double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                          double warmup_start_lr, double base_lr) {
  if (total_steps == 0) return base_lr;
  if (warmup_steps > 0 && step < warmup_steps) {
    return warmup_start_lr + (base_lr - warmup_start_lr) * static_cast<double>(step) /
                                 static_cast<double>(warmup_steps);
  }
  double progress = 1.0;
  if (total_steps > warmup_steps + 1) {
    progress = static_cast<double>(step - warmup_steps) /
               static_cast<double>(total_steps - 1 - warmup_steps);
  }
  if (progress > 1.0) progress = 1.0;
  return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * progress));
}

/// AdamW with decoupled weight decay. Decay touches matrices only, never
/// biases or norm gains, and is applied before the moment update.
template <typename T>
class AdamW {
 public:
  explicit AdamW(const std::vector<ParamRef<T>>& params, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor->shape());
      v_.emplace_back(p.tensor->shape());
    }
  }

  void step(const std::vector<ParamRef<T>>& params, const std::vector<Tensor<T>>& grads,
            double lr, double weight_decay) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
      throw contract_error("AdamW::step: parameter/gradient count mismatch");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& theta = *params[i].tensor;
      const Tensor<T>& g = grads[i];
      if (theta.shape() != g.shape()) {
        throw contract_error("AdamW::step: gradient shape mismatch for " + params[i].name);
      }
      if (!g.all_finite()) {
        throw numeric_error("AdamW::step: non-finite gradient in " + params[i].name);
      }
      if (weight_decay > 0.0 && params[i].decay()) {
        const T shrink = static_cast<T>(1.0 - lr * weight_decay);
        for (std::size_t j = 0; j < theta.size(); ++j) theta[j] *= shrink;
      }
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (std::size_t j = 0; j < theta.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        const double mj = beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * gj;
        const double vj = beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double m_hat = mj / bc1;
        const double v_hat = vj / bc2;
        theta[j] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + eps_));
      }
    }
  }

  std::size_t steps() const { return step_; }
  void set_steps(std::size_t s) { step_ = s; }

  std::vector<Tensor<T>>& moments_m() { return m_; }
  std::vector<Tensor<T>>& moments_v() { return v_; }
  const std::vector<Tensor<T>>& moments_m() const { return m_; }
  const std::vector<Tensor<T>>& moments_v() const { return v_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace dynamix
