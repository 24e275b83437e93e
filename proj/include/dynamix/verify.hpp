#pragma once

#include "dynamix/gradcheck.hpp"
#include "dynamix/model.hpp"

namespace dynamix {

/// End-to-end gradient verification: build a model, push a random batch
/// through an eval-mode forward into a cross-entropy loss, and compare every
/// sampled parameter coordinate against central differences. Drop-path stays
/// off so the loss is a deterministic function of the parameters.
///
/// Parameters are redrawn at a larger scale than the training init: at init
/// scale, deep coordinates carry gradients below the finite-difference noise
/// floor and the comparison measures noise instead of correctness.
template <typename T>
GradCheckReport model_grad_check(const ModelConfig& cfg, std::uint64_t seed, double eps,
                                 std::size_t coords, std::size_t batch = 4) {
  cfg.validate();
  auto weights = build_model<T>(cfg, seed);
  Rng weight_rng(seed + 55);
  for_each_param(weights, cfg, [&](const ParamRef<T>& p) {
    Tensor<T>& t = *p.tensor;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double z = weight_rng.normal();
      t[i] = static_cast<T>(p.kind == ParamKind::Gain ? 1.0 + 0.2 * z : 0.4 * z);
    }
  });

  Rng data_rng(seed + 101);
  Tensor<T> images({batch, cfg.in_channels, cfg.image_size, cfg.image_size});
  for (std::size_t i = 0; i < images.size(); ++i) {
    images[i] = static_cast<T>(data_rng.normal());
  }
  std::vector<int> labels;
  for (std::size_t i = 0; i < batch; ++i) {
    labels.push_back(static_cast<int>(data_rng.index(cfg.num_classes)));
  }

  auto refs = parameters(weights, cfg);
  std::vector<Tensor<T>*> params;
  params.reserve(refs.size());
  for (const auto& r : refs) params.push_back(r.tensor);

  Tape<T> tape;
  Binder<T> bind(tape);
  auto logits = model_forward(bind, images, weights, cfg, Mode::Eval);
  auto loss = cross_entropy_logits(logits, labels, 0.0);
  tape.backward(loss);
  std::vector<Tensor<T>> analytic;
  analytic.reserve(refs.size());
  for (const auto& r : refs) analytic.push_back(tape.grad_of(bind(*r.tensor)));

  auto loss_value = [&]() -> T {
    Tape<T> replay;
    replay.recording = false;
    Binder<T> rebind(replay);
    auto lg = model_forward(rebind, images, weights, cfg, Mode::Eval);
    return cross_entropy_logits(lg, labels, 0.0).scalar();
  };
  return grad_check(params, analytic, loss_value, eps, coords, seed + 7);
}

}  // namespace dynamix
