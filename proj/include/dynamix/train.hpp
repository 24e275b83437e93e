#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>

#include "dynamix/checkpoint.hpp"
#include "dynamix/data.hpp"
#include "dynamix/model.hpp"
#include "dynamix/optim.hpp"

namespace dynamix {

/// Eval-mode top-1 accuracy over a dataset, batched, deterministic.
template <typename T>
double evaluate(ModelWeights<T>& weights, const ModelConfig& cfg, const Dataset<T>& data,
                std::size_t batch = 64) {
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t count = std::min(batch, data.size() - start);
    idx.resize(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
    auto [images, labels] = gather_batch(data, idx);
    Tape<T> tape;
    tape.recording = false;
    auto logits = model_forward(tape, images, weights, cfg, Mode::Eval);
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < cfg.num_classes; ++k) {
        if (logits.value(i, k) > logits.value(i, best)) best = k;
      }
      if (static_cast<int>(best) == labels[i]) ++correct;
    }
  }
  return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

template <typename T>
double evaluate_checkpoint(const std::string& path, const Dataset<T>& data,
                           std::size_t batch = 64) {
  auto ck = load_checkpoint<T>(path);
  return evaluate(ck.weights, ck.config, data, batch);
}

struct TrainResult {
  std::string metrics_path;
  std::string final_checkpoint;
  double final_val_top1 = 0.0;
  double final_train_loss = 0.0;
  std::size_t steps = 0;
};

namespace detail {

inline std::string format_full(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

}  // namespace detail

/// Train a model on the given splits. One row of the metrics CSV is written
/// every log_every steps (epoch,step,lr,train_loss,val_top1; the accuracy
/// column carries the most recent epoch-end value). A checkpoint is written
/// after every epoch and at the end; a non-finite loss aborts with the last
/// checkpoint left on disk.
template <typename T>
TrainResult train_model(const RunConfig& run, const Dataset<T>& train_set,
                        const Dataset<T>& val_set, const std::string& out_dir) {
  run.validate();
  const ModelConfig& cfg = run.model;
  const TrainConfig& tc = run.train;
  if (train_set.size() < tc.batch_size) {
    throw config_error("train: batch_size " + std::to_string(tc.batch_size) +
                       " exceeds the training set size " + std::to_string(train_set.size()));
  }
  std::filesystem::create_directories(out_dir);

  auto weights = build_model<T>(cfg, tc.seed);
  auto refs = parameters(weights, cfg);
  AdamW<T> opt(refs);
  Rng shuffle_rng(tc.seed + 1);
  Rng drop_rng(tc.seed + 2);
  Rng augment_rng(tc.seed + 3);
  const bool augment = run.data.kind == "cifar10";

  const std::size_t steps_per_epoch = std::max<std::size_t>(1, train_set.size() / tc.batch_size);
  std::size_t total_steps = tc.epochs * steps_per_epoch;
  if (tc.max_steps > 0) total_steps = std::min(total_steps, tc.max_steps);
  const std::size_t warmup_steps = tc.warmup_epochs * steps_per_epoch;

  TrainResult result;
  result.metrics_path = out_dir + "/metrics.csv";
  std::ofstream metrics(result.metrics_path, std::ios::trunc);
  if (!metrics) throw io_error("cannot open metrics file: " + result.metrics_path);
  metrics << "epoch,step,lr,train_loss,val_top1\n";

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::string last_checkpoint;
  std::string last_val = "";
  std::size_t step = 0;
  double loss_value = 0.0;
  for (std::size_t epoch = 0; epoch < tc.epochs && step < total_steps; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t bstart = 0; bstart + tc.batch_size <= order.size() && step < total_steps;
         bstart += tc.batch_size) {
      std::vector<std::size_t> idx(order.begin() + bstart, order.begin() + bstart + tc.batch_size);
      auto [images, labels] = gather_batch(train_set, idx, augment, &augment_rng);

      double lr = 0.0;
      try {
        Tape<T> tape;
        Binder<T> bind(tape);
        auto logits = model_forward(bind, images, weights, cfg, Mode::Train, &drop_rng);
        auto loss = cross_entropy_logits(logits, labels, tc.label_smoothing);
        loss_value = static_cast<double>(loss.scalar());
        if (!std::isfinite(loss_value)) {
          throw numeric_error("training loss is not finite at step " + std::to_string(step));
        }
        tape.backward(loss);
        std::vector<Tensor<T>> grads;
        grads.reserve(refs.size());
        for (const auto& r : refs) grads.push_back(tape.grad_of(bind(*r.tensor)));

        lr = lr_schedule(step, total_steps, warmup_steps, tc.warmup_start_lr, tc.base_lr);
        opt.step(refs, grads, lr, tc.weight_decay);
      } catch (const numeric_error& e) {
        throw numeric_error(std::string(e.what()) + "; last checkpoint: " +
                            (last_checkpoint.empty() ? "(none)" : last_checkpoint));
      }

      if (step % tc.log_every == 0) {
        metrics << epoch << ',' << step << ',' << detail::format_full(lr) << ','
                << detail::format_full(loss_value) << ',' << last_val << '\n';
      }
      ++step;
    }
    result.final_val_top1 = evaluate(weights, cfg, val_set);
    last_val = detail::format_full(result.final_val_top1);
    metrics << epoch << ",end,," << detail::format_full(loss_value) << ',' << last_val << '\n';
    last_checkpoint = out_dir + "/checkpoint_epoch" + std::to_string(epoch) + ".dyx";
    save_checkpoint(last_checkpoint, weights, cfg, &tc, &run.data, &opt);
  }

  result.final_checkpoint = out_dir + "/checkpoint_final.dyx";
  save_checkpoint(result.final_checkpoint, weights, cfg, &tc, &run.data, &opt);
  result.final_train_loss = loss_value;
  result.steps = step;
  metrics.close();
  return result;
}

}  // namespace dynamix
