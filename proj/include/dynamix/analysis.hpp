#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "dynamix/model.hpp"

namespace dynamix {

struct CapacityRow {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;  // multiply-accumulates per single image
};

struct CapacityReport {
  std::vector<CapacityRow> rows;

  std::uint64_t total_params() const {
    std::uint64_t n = 0;
    for (const auto& r : rows) n += r.params;
    return n;
  }
  std::uint64_t total_macs() const {
    std::uint64_t n = 0;
    for (const auto& r : rows) n += r.macs;
    return n;
  }
  const CapacityRow* find(const std::string& name) const {
    for (const auto& r : rows) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }

  void write_csv(std::ostream& os) const {
    os << "component,params,macs\n";
    for (const auto& r : rows) os << r.name << ',' << r.params << ',' << r.macs << '\n';
    os << "total," << total_params() << ',' << total_macs() << '\n';
  }

  json to_json() const {
    json rows_json = json::array();
    for (const auto& r : rows) {
      rows_json.push_back(json{{"component", r.name}, {"params", r.params}, {"macs", r.macs}});
    }
    return json{{"rows", rows_json},
                {"total_params", total_params()},
                {"total_macs", total_macs()}};
  }
};

namespace detail {

struct OpCost {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;  // one application on N tokens
};

/// Parameters and MACs of one mixing op on N tokens of D channels. MACs
/// count matrix products only: per-segment reduction, per-segment generator
/// application, the mixing product and the output fusion.
inline OpCost op_cost(MixGenKind kind, std::uint64_t n, std::uint64_t d, std::uint64_t s,
                      std::uint64_t r) {
  OpCost c;
  switch (kind) {
    case MixGenKind::Dynamic:
      c.params = s * d * r + n * n * n * r + d * d;
      c.macs = s * n * d * r + s * n * n * n * r + n * n * d + n * d * d;
      break;
    case MixGenKind::DensePerToken:
      c.params = s * d * n + d * d;
      c.macs = s * n * n * d + n * n * d + n * d * d;
      break;
    case MixGenKind::StaticRandom:
      c.params = n * n + d * d;
      c.macs = n * n * d + n * d * d;
      break;
  }
  return c;
}

struct StageCost {
  CapacityRow ln, row_ops, col_ops, proj_c, proj_o, reweight, mlp;
};

inline StageCost stage_cost(const ModelConfig& cfg, std::uint64_t grid, std::uint64_t hidden,
                            std::uint64_t segments, std::uint64_t depth,
                            const std::string& prefix) {
  const std::uint64_t tokens = grid * grid;
  const std::uint64_t k = cfg.enabled_branches();
  StageCost s;
  s.ln = {prefix + ".ln", depth * 4 * hidden, 0};  // two norms per layer, no MACs counted

  const OpCost op = op_cost(cfg.gen_kind, grid, hidden, segments, cfg.reduced_dim);
  if (!cfg.disable_row) {
    s.row_ops = {prefix + ".row_ops", depth * op.params, depth * grid * op.macs};
  } else {
    s.row_ops = {prefix + ".row_ops", 0, 0};
  }
  if (!cfg.disable_col) {
    // Shared ops reuse the row parameters but still run their own products.
    const std::uint64_t col_params = cfg.share_row_col ? 0 : depth * op.params;
    s.col_ops = {prefix + ".col_ops", col_params, depth * grid * op.macs};
  } else {
    s.col_ops = {prefix + ".col_ops", 0, 0};
  }
  if (!cfg.disable_channel) {
    s.proj_c = {prefix + ".proj_c", depth * (hidden * hidden + hidden),
                depth * tokens * hidden * hidden};
  } else {
    s.proj_c = {prefix + ".proj_c", 0, 0};
  }
  s.proj_o = {prefix + ".proj_o", depth * (hidden * hidden + hidden),
              depth * tokens * hidden * hidden};
  if (!cfg.disable_reweight) {
    const std::uint64_t bottleneck = hidden / 4;
    s.reweight = {prefix + ".reweight",
                  depth * (hidden * bottleneck + bottleneck * k * hidden),
                  depth * (hidden * bottleneck + bottleneck * k * hidden)};
  } else {
    s.reweight = {prefix + ".reweight", 0, 0};
  }
  const std::uint64_t mlp_hidden = cfg.mlp_ratio * hidden;
  s.mlp = {prefix + ".mlp",
           depth * (hidden * mlp_hidden + mlp_hidden + mlp_hidden * hidden + hidden),
           depth * tokens * 2 * hidden * mlp_hidden};
  return s;
}

}  // namespace detail

/// Closed-form capacity accounting straight from the config, without
/// instantiating any weights. MAC counts cover matrix products only
/// (projections, generators, mixing products, embeddings, head); softmax,
/// normalization, activations and pooling are excluded. One MAC is reported
/// as one FLOP.
inline CapacityReport count_capacity(const ModelConfig& cfg) {
  cfg.validate();
  CapacityReport rep;
  const std::uint64_t g1 = cfg.grid1(), g2 = cfg.grid2();
  const std::uint64_t d1 = cfg.stage1.hidden, d2 = cfg.stage2.hidden;
  const std::uint64_t patch_dim =
      cfg.stage1.patch_size * cfg.stage1.patch_size * cfg.in_channels;
  rep.rows.push_back(
      {"stage1.embed", patch_dim * d1 + d1, g1 * g1 * patch_dim * d1});

  auto push_stage = [&rep](const detail::StageCost& s) {
    rep.rows.push_back(s.ln);
    rep.rows.push_back(s.row_ops);
    rep.rows.push_back(s.col_ops);
    rep.rows.push_back(s.proj_c);
    rep.rows.push_back(s.proj_o);
    rep.rows.push_back(s.reweight);
    rep.rows.push_back(s.mlp);
  };
  push_stage(detail::stage_cost(cfg, g1, d1, cfg.stage1.segments, cfg.stage1.depth, "stage1"));

  const std::uint64_t merge_dim = cfg.stage2.patch_size * cfg.stage2.patch_size * d1;
  rep.rows.push_back({"stage2.embed", merge_dim * d2 + d2, g2 * g2 * merge_dim * d2});
  push_stage(detail::stage_cost(cfg, g2, d2, cfg.stage2.segments, cfg.stage2.depth, "stage2"));

  rep.rows.push_back({"final_ln", 2 * d2, 0});
  rep.rows.push_back({"head", d2 * cfg.num_classes + cfg.num_classes, d2 * cfg.num_classes});
  return rep;
}

inline CapacityReport count_params(const ModelConfig& cfg) { return count_capacity(cfg); }
inline CapacityReport count_flops(const ModelConfig& cfg) { return count_capacity(cfg); }

struct ThroughputReport {
  double mean_ips = 0.0;
  double std_ips = 0.0;
  std::size_t windows = 0;
  double mean_batch_seconds = 0.0;
};

/// Steady-state eval-mode forward throughput. Runs a warmup pass, then at
/// least five timing windows and reports mean and standard deviation of
/// images per second across windows.
template <typename T = float>
ThroughputReport bench_throughput(const ModelConfig& cfg, std::size_t batch, double seconds,
                                  std::uint64_t seed = 0) {
  cfg.validate();
  auto weights = build_model<T>(cfg, seed);
  Rng rng(seed + 1);
  Tensor<T> images({batch, cfg.in_channels, cfg.image_size, cfg.image_size});
  for (std::size_t i = 0; i < images.size(); ++i) {
    images[i] = static_cast<T>(rng.normal() * 0.5);
  }

  auto forward_once = [&]() {
    Tape<T> tape;
    tape.recording = false;
    volatile T sink = model_forward(tape, images, weights, cfg, Mode::Eval).value[0];
    (void)sink;
  };
  forward_once();  // warmup

  const std::size_t min_windows = 5;
  const double window_target = seconds / static_cast<double>(min_windows);
  std::vector<double> ips;
  std::size_t total_batches = 0;
  using clock = std::chrono::steady_clock;
  for (std::size_t w = 0; w < min_windows; ++w) {
    const auto start = clock::now();
    std::size_t n = 0;
    double elapsed = 0.0;
    do {
      forward_once();
      ++n;
      elapsed = std::chrono::duration<double>(clock::now() - start).count();
    } while (elapsed < window_target);
    ips.push_back(static_cast<double>(n * batch) / elapsed);
    total_batches += n;
  }

  ThroughputReport rep;
  rep.windows = ips.size();
  double sum = 0.0;
  for (double v : ips) sum += v;
  rep.mean_ips = sum / static_cast<double>(ips.size());
  double var = 0.0;
  for (double v : ips) var += (v - rep.mean_ips) * (v - rep.mean_ips);
  rep.std_ips = std::sqrt(var / static_cast<double>(ips.size()));
  rep.mean_batch_seconds =
      rep.mean_ips > 0 ? static_cast<double>(batch) / rep.mean_ips : 0.0;
  return rep;
}

}  // namespace dynamix
