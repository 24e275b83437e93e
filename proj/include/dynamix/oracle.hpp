#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dynamix/weights.hpp"

// Loop-level reference implementations of the mixing operation, the weight
// generators and the block, used as ground truth by the equivalence tests.
// Everything here runs in double and favors obviousness over speed.

namespace dynamix::oracle {

struct OracleInstance {
  std::size_t tokens = 0;    // N
  std::size_t channels = 0;  // D
  std::size_t segments = 1;  // S
  std::size_t reduced = 1;   // d
  Tensor<double> x;          // [N, D]
  DynaMixerOpWeights<double> w;
};

inline void check_guard(std::size_t n, std::size_t d) {
  if (n * d > 256) {
    throw contract_error("oracle: instance too large, N*D = " + std::to_string(n * d) +
                         " exceeds 256");
  }
}

inline void softmax_row_inplace(std::vector<double>& v) {
  double m = v[0];
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double& x : v) {
    x = std::exp(x - m);
    s += x;
  }
  for (double& x : v) x /= s;
}

inline double gelu_scalar(double x) {
  return x * 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
}

/// Per-segment mixing matrices for a single instance x: [N, D].
inline std::vector<Tensor<double>> naive_generate(const Tensor<double>& x,
                                                  const DynaMixerOpWeights<double>& w) {
  const std::size_t n = w.tokens, d = w.channels, s_count = w.segments, r = w.reduced;
  check_guard(n, d);
  std::vector<Tensor<double>> ps;
  for (std::size_t s = 0; s < s_count; ++s) {
    Tensor<double> p({n, n});
    switch (w.kind) {
      case MixGenKind::Dynamic: {
        // Reduce all tokens with this segment's map.
        std::vector<double> flat(n * r, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < r; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += x(i, c) * w.reduce[s](c, j);
            flat[i * r + j] = acc;  // token-major flattening
          }
        }
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<double> row(n, 0.0);
          for (std::size_t k = 0; k < n; ++k) {
            double acc = 0.0;
            for (std::size_t q = 0; q < n * r; ++q) acc += flat[q] * w.gen(q, i * n + k);
            row[k] = acc;
          }
          softmax_row_inplace(row);
          for (std::size_t k = 0; k < n; ++k) p(i, k) = row[k];
        }
        break;
      }
      case MixGenKind::DensePerToken: {
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<double> row(n, 0.0);
          for (std::size_t k = 0; k < n; ++k) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += x(i, c) * w.dense[s](c, k);
            row[k] = acc;
          }
          softmax_row_inplace(row);
          for (std::size_t k = 0; k < n; ++k) p(i, k) = row[k];
        }
        break;
      }
      case MixGenKind::StaticRandom: {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t k = 0; k < n; ++k) p(i, k) = w.mix(i, k);
        }
        break;
      }
    }
    ps.push_back(std::move(p));
  }
  return ps;
}

/// Mixing operation on a single instance: generate, mix each channel
/// segment, concatenate, fuse.
inline Tensor<double> naive_dynamixer_op(const Tensor<double>& x,
                                         const DynaMixerOpWeights<double>& w) {
  const std::size_t n = w.tokens, d = w.channels;
  check_guard(n, d);
  const std::size_t width = d / w.segments;
  const auto ps = naive_generate(x, w);

  Tensor<double> mixed({n, d});
  for (std::size_t s = 0; s < w.segments; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        double acc = 0.0;
        for (std::size_t m = 0; m < n; ++m) acc += ps[s](i, m) * x(m, s * width + j);
        mixed(i, s * width + j) = acc;
      }
    }
  }
  Tensor<double> y({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t e = 0; e < d; ++e) acc += mixed(i, e) * w.out_fuse(e, c);
      y(i, c) = acc;
    }
  }
  return y;
}

inline Tensor<double> naive_dynamixer_op(const OracleInstance& inst) {
  return naive_dynamixer_op(inst.x, inst.w);
}

/// The unreduced generator: one (N*D) x N map per output token, applied to
/// the flattened token matrix. Kept as documentation of why the reduced form
/// exists; never used in the trainable model.
inline Tensor<double> naive_full_matrix_op(const Tensor<double>& x,
                                           const std::vector<Tensor<double>>& w_full) {
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  check_guard(n, d);
  if (w_full.size() != n) {
    throw contract_error("naive_full_matrix_op: need one map per output token");
  }
  std::vector<double> flat(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) flat[i * d + c] = x(i, c);
  }
  Tensor<double> p({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      double acc = 0.0;
      for (std::size_t q = 0; q < n * d; ++q) acc += flat[q] * w_full[i](q, k);
      row[k] = acc;
    }
    softmax_row_inplace(row);
    for (std::size_t k = 0; k < n; ++k) p(i, k) = row[k];
  }
  return p;
}

/// Closed-form parameter count of the mixing operation: reduction maps, the
/// shared generator and the fusion matrix.
inline std::uint64_t param_formula(std::uint64_t n, std::uint64_t d, std::uint64_t d_reduced,
                                   std::uint64_t s) {
  if (n < 1 || d < 1 || d_reduced < 1 || s < 1) {
    throw config_error("param_formula: all arguments must be >= 1");
  }
  if (d % s != 0) {
    throw config_error("param_formula: D=" + std::to_string(d) + " not divisible by S=" +
                       std::to_string(s));
  }
  return s * d * d_reduced + n * n * n * d_reduced + d * d;
}

/// Reference reweighting over flattened-token branches, each [M, D].
inline Tensor<double> naive_reweight(const std::vector<Tensor<double>>& branches,
                                     const ReweightW<double>& w) {
  const std::size_t k = branches.size();
  const std::size_t m = branches[0].shape()[0], d = branches[0].shape()[1];
  const std::size_t bottleneck = w.w1.shape()[1];

  std::vector<double> pooled(d, 0.0);
  for (const auto& br : branches) {
    for (std::size_t t = 0; t < m; ++t) {
      for (std::size_t c = 0; c < d; ++c) pooled[c] += br(t, c);
    }
  }
  for (double& v : pooled) v /= static_cast<double>(m);

  std::vector<double> hidden(bottleneck, 0.0);
  for (std::size_t q = 0; q < bottleneck; ++q) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += pooled[c] * w.w1(c, q);
    hidden[q] = gelu_scalar(acc);
  }
  Tensor<double> logits({k, d});
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t q = 0; q < bottleneck; ++q) acc += hidden[q] * w.w2(q, i * d + c);
      logits(i, c) = acc;
    }
  }
  Tensor<double> out({m, d});
  for (std::size_t c = 0; c < d; ++c) {
    std::vector<double> alpha(k);
    for (std::size_t i = 0; i < k; ++i) alpha[i] = logits(i, c);
    softmax_row_inplace(alpha);
    for (std::size_t t = 0; t < m; ++t) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += alpha[i] * branches[i](t, c);
      out(t, c) = acc;
    }
  }
  return out;
}

/// Loop transcription of the block: row mixing per grid row, column mixing
/// per grid column, channel projection, fusion, output projection.
inline Tensor<double> naive_dynamixer_block(const Tensor<double>& x,
                                            const BlockWeights<double>& w) {
  const std::size_t h = x.shape()[0], width = x.shape()[1], d = x.shape()[2];
  const std::size_t m = h * width;

  std::vector<Tensor<double>> branches;
  if (w.row_op) {
    Tensor<double> yh({m, d});
    for (std::size_t r = 0; r < h; ++r) {
      Tensor<double> row({width, d});
      for (std::size_t c = 0; c < width; ++c) {
        for (std::size_t e = 0; e < d; ++e) row(c, e) = x(r, c, e);
      }
      Tensor<double> mixed = naive_dynamixer_op(row, *w.row_op);
      for (std::size_t c = 0; c < width; ++c) {
        for (std::size_t e = 0; e < d; ++e) yh(r * width + c, e) = mixed(c, e);
      }
    }
    branches.push_back(std::move(yh));
  }
  if (w.col_op) {
    Tensor<double> yw({m, d});
    for (std::size_t c = 0; c < width; ++c) {
      Tensor<double> col({h, d});
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t e = 0; e < d; ++e) col(r, e) = x(r, c, e);
      }
      Tensor<double> mixed = naive_dynamixer_op(col, *w.col_op);
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t e = 0; e < d; ++e) yw(r * width + c, e) = mixed(r, e);
      }
    }
    branches.push_back(std::move(yw));
  }
  if (w.proj_c) {
    Tensor<double> yc({m, d});
    for (std::size_t t = 0; t < m; ++t) {
      const std::size_t r = t / width, c = t % width;
      for (std::size_t e2 = 0; e2 < d; ++e2) {
        double acc = w.proj_c->b[e2];
        for (std::size_t e = 0; e < d; ++e) acc += x(r, c, e) * w.proj_c->w(e, e2);
        yc(t, e2) = acc;
      }
    }
    branches.push_back(std::move(yc));
  }
  if (branches.empty()) throw config_error("naive_dynamixer_block: no branches enabled");

  Tensor<double> fused({m, d});
  if (w.reweight) {
    fused = naive_reweight(branches, *w.reweight);
  } else {
    for (const auto& br : branches) {
      for (std::size_t i = 0; i < fused.size(); ++i) fused[i] += br[i];
    }
  }

  Tensor<double> out({h, width, d});
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t e2 = 0; e2 < d; ++e2) {
      double acc = w.proj_o.b[e2];
      for (std::size_t e = 0; e < d; ++e) acc += fused(t, e) * w.proj_o.w(e, e2);
      out(t / width, t % width, e2) = acc;
    }
  }
  return out;
}

/// Random small instance helper shared by equivalence and property tests.
inline OracleInstance random_instance(std::size_t n, std::size_t d, std::size_t s,
                                      std::size_t d_reduced, MixGenKind kind, std::uint64_t seed,
                                      double weight_std = 0.5) {
  OracleInstance inst;
  inst.tokens = n;
  inst.channels = d;
  inst.segments = s;
  inst.reduced = d_reduced;
  Rng rng(seed);
  inst.x = randn<double>({n, d}, rng);
  inst.w = detail::make_op_weights<double>(kind, n, d, s, d_reduced);
  auto fill = [&](Tensor<double>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * weight_std;
  };
  for (auto& t : inst.w.reduce) fill(t);
  if (!inst.w.gen.empty()) fill(inst.w.gen);
  for (auto& t : inst.w.dense) fill(t);
  if (!inst.w.mix.empty()) fill(inst.w.mix);
  fill(inst.w.out_fuse);
  return inst;
}

}  // namespace dynamix::oracle
