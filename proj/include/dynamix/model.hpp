#pragma once

#include <unordered_map>
#include <vector>

#include "dynamix/ops.hpp"
#include "dynamix/weights.hpp"

namespace dynamix {

enum class Mode { Train, Eval };

inline constexpr double kLayerNormEps = 1e-6;

/// Registers parameter tensors on a tape once per forward pass, keyed by
/// storage. Tensors that share storage (a shared row/column op) bind to the
/// same tape node, so their gradients accumulate.
template <typename T>
class Binder {
 public:
  explicit Binder(Tape<T>& tape) : tape_(&tape) {}

  Var<T> operator()(Tensor<T>& t) {
    const void* key = static_cast<const void*>(t.data());
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    Var<T> v = tape_->leaf(t);
    cache_.emplace(key, v);
    return v;
  }

  Tape<T>& tape() { return *tape_; }

 private:
  Tape<T>* tape_;
  std::unordered_map<const void*, Var<T>> cache_;
};

/// Captures the mixing matrices of one op application for inspection.
template <typename T>
struct MixingProbe {
  std::size_t layer = 0;  // global layer index across both stages
  bool column = false;    // row op when false, column op when true
  std::vector<Tensor<T>> captured;  // per segment: [G, N, N]
};

/// Produce the per-segment token mixing matrices for a batch of token lines.
/// x is [G, N, D]; the result holds S matrices of shape [G, N, N].
template <typename T>
std::vector<Var<T>> generate_mixing_matrices(Binder<T>& bind, const Var<T>& x,
                                             DynaMixerOpWeights<T>& w) {
  const auto& sh = x.shape();
  if (sh.size() != 3) {
    throw shape_error("generate_mixing_matrices: expected [G, N, D], got " + shape_str(sh));
  }
  const std::size_t g = sh[0], n = sh[1], d = sh[2];
  if (n != w.tokens || d != w.channels) {
    throw shape_error("generate_mixing_matrices: tokens " + shape_str(sh) +
                      " do not match weights for N=" + std::to_string(w.tokens) +
                      ", D=" + std::to_string(w.channels));
  }
  if (d % w.segments != 0) {
    throw config_error("generate_mixing_matrices: D=" + std::to_string(d) +
                       " not divisible by S=" + std::to_string(w.segments));
  }

  std::vector<Var<T>> ps;
  ps.reserve(w.segments);
  switch (w.kind) {
    case MixGenKind::Dynamic: {
      for (std::size_t s = 0; s < w.segments; ++s) {
        // Reduce every token from D to d channels, flatten token-major, then
        // one shared generator emits all N*N logits.
        auto reduced = matmul(x, bind(w.reduce[s]));            // [G, N, d]
        auto flat = reshape(reduced, {g, n * w.reduced});       // token-major
        auto logits = matmul(flat, bind(w.gen));                // [G, N*N]
        ps.push_back(softmax_rows(reshape(logits, {g, n, n})));
      }
      break;
    }
    case MixGenKind::DensePerToken: {
      for (std::size_t s = 0; s < w.segments; ++s) {
        auto logits = matmul(x, bind(w.dense[s]));  // row i depends on token i only
        ps.push_back(softmax_rows(logits));
      }
      break;
    }
    case MixGenKind::StaticRandom: {
      auto p = broadcast0(bind(w.mix), g);  // raw learnable matrix, no softmax
      for (std::size_t s = 0; s < w.segments; ++s) ps.push_back(p);
      break;
    }
  }
  return ps;
}

/// Token mixing over a batch of token lines: x [G, N, D] -> [G, N, D].
/// Each segment's channel slice is mixed by its own generated matrix and the
/// concatenated result goes through the output fusion matrix.
template <typename T>
Var<T> dynamixer_op(Binder<T>& bind, const Var<T>& x, DynaMixerOpWeights<T>& w,
                    MixingProbe<T>* probe = nullptr) {
  if (x.shape().size() == 2) {
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    auto lifted = dynamixer_op(bind, reshape(x, {std::size_t{1}, n, d}), w, probe);
    return reshape(lifted, {n, d});
  }
  auto ps = generate_mixing_matrices(bind, x, w);
  if (probe) {
    probe->captured.clear();
    for (const auto& p : ps) probe->captured.push_back(p.value);
  }
  const std::size_t d = x.shape()[2];
  const std::size_t width = d / w.segments;
  std::vector<Var<T>> mixed;
  mixed.reserve(w.segments);
  for (std::size_t s = 0; s < w.segments; ++s) {
    mixed.push_back(bmm(ps[s], slice_lastdim(x, s * width, width)));
  }
  return matmul(concat_lastdim(mixed), bind(w.out_fuse));
}

/// Per-channel softmax fusion of the mixing branches. Branch weights are
/// predicted from the token-pooled sum through a D/4 bottleneck.
template <typename T>
Var<T> reweight_fuse(Binder<T>& bind, const std::vector<Var<T>>& branches, ReweightW<T>& w) {
  const std::size_t k = branches.size();
  if (k == 0) throw config_error("reweight_fuse: no branches");
  const auto& sh = branches[0].shape();
  const std::size_t b = sh[0], d = sh.back();
  std::size_t mid = 1;
  for (std::size_t i = 1; i + 1 < sh.size(); ++i) mid *= sh[i];

  Var<T> summed = branches[0];
  for (std::size_t i = 1; i < k; ++i) summed = add(summed, branches[i]);
  auto pooled = mean_axis1(reshape(summed, {b, mid, d}));        // [B, D]
  auto hidden = gelu(matmul(pooled, bind(w.w1)));                // [B, D/4]
  auto logits = matmul(hidden, bind(w.w2));                      // [B, k*D]
  auto alpha = softmax_rows(permute(reshape(logits, {b, k, d}), {0, 2, 1}));  // [B, D, k]

  Var<T> out;
  for (std::size_t i = 0; i < k; ++i) {
    auto a_i = reshape(slice_lastdim(alpha, i, 1), {b, d});
    auto weighted = mul_bcast_channels(branches[i], a_i);
    out = (i == 0) ? weighted : add(out, weighted);
  }
  return out;
}

/// One mixing block over a token grid x: [B, H, W, D]. Row and column mixing
/// share op parameters across lines; channel mixing is a per-token linear
/// map. Enabled branches are fused (reweighted or summed) and projected.
template <typename T>
Var<T> dynamixer_block(Binder<T>& bind, const Var<T>& x, BlockWeights<T>& w,
                       std::size_t layer_idx = 0, MixingProbe<T>* probe = nullptr) {
  const auto& sh = x.shape();
  if (sh.size() != 4) {
    throw shape_error("dynamixer_block: expected [B, H, W, D], got " + shape_str(sh));
  }
  const std::size_t b = sh[0], h = sh[1], width = sh[2], d = sh[3];

  std::vector<Var<T>> branches;
  if (w.row_op) {
    MixingProbe<T>* row_probe =
        (probe && probe->layer == layer_idx && !probe->column) ? probe : nullptr;
    auto rows = reshape(x, {b * h, width, d});
    auto mixed = dynamixer_op(bind, rows, *w.row_op, row_probe);
    branches.push_back(reshape(mixed, {b, h, width, d}));
  }
  if (w.col_op) {
    MixingProbe<T>* col_probe =
        (probe && probe->layer == layer_idx && probe->column) ? probe : nullptr;
    auto cols = reshape(permute(x, {0, 2, 1, 3}), {b * width, h, d});
    auto mixed = dynamixer_op(bind, cols, *w.col_op, col_probe);
    branches.push_back(permute(reshape(mixed, {b, width, h, d}), {0, 2, 1, 3}));
  }
  if (w.proj_c) {
    branches.push_back(linear(x, bind(w.proj_c->w), bind(w.proj_c->b)));
  }
  if (branches.empty()) {
    throw config_error("dynamixer_block: all mixing branches are disabled");
  }

  Var<T> fused;
  if (w.reweight) {
    fused = reweight_fuse(bind, branches, *w.reweight);
  } else {
    fused = branches[0];
    for (std::size_t i = 1; i < branches.size(); ++i) fused = add(fused, branches[i]);
  }
  return linear(fused, bind(w.proj_o.w), bind(w.proj_o.b));
}

/// Zero an entire residual branch per sample with the given probability and
/// rescale survivors. Identity in eval mode.
template <typename T>
Var<T> drop_path(Tape<T>& tape, const Var<T>& branch, double rate, Mode mode, Rng* rng) {
  if (mode == Mode::Eval || rate <= 0.0) return branch;
  if (!rng) throw contract_error("drop_path: train mode needs an rng");
  const std::size_t b = branch.shape()[0];
  Tensor<T> mask({b});
  if (rate < 1.0) {
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < b; ++i) {
      mask[i] = (rng->uniform() >= rate) ? keep : T(0);
    }
  }
  return mul_bcast_samples(branch, tape.constant(mask));
}

/// Pre-norm residual layer: token mixing block then channel MLP.
template <typename T>
Var<T> mixer_layer(Binder<T>& bind, Var<T> x, MixerLayerWeights<T>& w, double drop_rate,
                   Mode mode, Rng* rng, std::size_t layer_idx = 0,
                   MixingProbe<T>* probe = nullptr) {
  auto& tape = bind.tape();
  auto normed = layer_norm(x, bind(w.ln1.gain), bind(w.ln1.bias), static_cast<T>(kLayerNormEps));
  auto blk = dynamixer_block(bind, normed, w.block, layer_idx, probe);
  x = add(x, drop_path(tape, blk, drop_rate, mode, rng));

  auto normed2 = layer_norm(x, bind(w.ln2.gain), bind(w.ln2.bias), static_cast<T>(kLayerNormEps));
  auto h = gelu(linear(normed2, bind(w.fc1.w), bind(w.fc1.b)));
  auto m = linear(h, bind(w.fc2.w), bind(w.fc2.b));
  return add(x, drop_path(tape, m, drop_rate, mode, rng));
}

/// Cut images [B, C, H, W] into non-overlapping patches: [B, H/p * W/p,
/// p*p*C]. Within a patch, values are ordered (py, px, channel).
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, std::size_t p) {
  const auto& sh = images.shape();
  if (sh.size() != 4) throw shape_error("extract_patches: expected [B, C, H, W]");
  const std::size_t b = sh[0], c = sh[1], h = sh[2], w = sh[3];
  if (h % p != 0 || w % p != 0) {
    throw shape_error("extract_patches: image " + shape_str(sh) + " not divisible by patch " +
                      std::to_string(p));
  }
  const std::size_t gh = h / p, gw = w / p;
  Tensor<T> out({b, gh * gw, p * p * c});
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx) {
        const std::size_t tok = gy * gw + gx;
        for (std::size_t py = 0; py < p; ++py) {
          for (std::size_t px = 0; px < p; ++px) {
            for (std::size_t ci = 0; ci < c; ++ci) {
              out(bi, tok, (py * p + px) * c + ci) =
                  images(bi, ci, gy * p + py, gx * p + px);
            }
          }
        }
      }
    }
  }
  return out;
}

/// Merge each p x p token neighborhood into one concatenated vector:
/// [B, H, W, D] -> [B, H/p, W/p, p*p*D], ordered (dy, dx, channel).
template <typename T>
Var<T> merge_tokens(const Var<T>& x, std::size_t p) {
  const auto& sh = x.shape();
  if (sh.size() != 4) throw shape_error("merge_tokens: expected [B, H, W, D]");
  const std::size_t b = sh[0], h = sh[1], w = sh[2], d = sh[3];
  if (h % p != 0 || w % p != 0) {
    throw shape_error("merge_tokens: grid " + shape_str(sh) + " not divisible by " +
                      std::to_string(p));
  }
  auto split = reshape(x, {b, h / p, p, w / p, p, d});
  auto grouped = permute(split, {0, 1, 3, 2, 4, 5});
  return reshape(grouped, {b, h / p, w / p, p * p * d});
}

/// Full forward pass: patch embedding, stage-1 layers, token merge + second
/// embedding, stage-2 layers, final norm, token mean pooling, classifier.
/// Per-layer drop-path rates ramp linearly from 0 to stoch_depth across the
/// total depth. Binding through the caller's Binder lets the caller look up
/// parameter gradients after backward().
template <typename T>
Var<T> model_forward(Binder<T>& bind, const Tensor<T>& images, ModelWeights<T>& w,
                     const ModelConfig& cfg, Mode mode, Rng* rng = nullptr,
                     MixingProbe<T>* probe = nullptr) {
  const auto& sh = images.shape();
  if (sh.size() != 4 || sh[1] != cfg.in_channels || sh[2] != cfg.image_size ||
      sh[3] != cfg.image_size) {
    throw config_error("model_forward: image batch " + shape_str(sh) + " does not match " +
                       std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.image_size) +
                       "x" + std::to_string(cfg.image_size));
  }
  const std::size_t b = sh[0];
  const std::size_t g1 = cfg.grid1(), g2 = cfg.grid2();
  const std::size_t total = cfg.total_depth();
  auto ramp = [&](std::size_t layer) {
    return total > 1 ? cfg.stoch_depth * static_cast<double>(layer) /
                           static_cast<double>(total - 1)
                     : 0.0;
  };

  auto& tape = bind.tape();
  auto patches = tape.constant(extract_patches(images, cfg.stage1.patch_size));
  auto x = linear(patches, bind(w.embed1.w), bind(w.embed1.b));
  x = reshape(x, {b, g1, g1, cfg.stage1.hidden});

  std::size_t layer_idx = 0;
  for (auto& layer : w.stage1) {
    x = mixer_layer(bind, x, layer, ramp(layer_idx), mode, rng, layer_idx, probe);
    ++layer_idx;
  }

  x = merge_tokens(x, cfg.stage2.patch_size);
  x = linear(x, bind(w.embed2.w), bind(w.embed2.b));
  for (auto& layer : w.stage2) {
    x = mixer_layer(bind, x, layer, ramp(layer_idx), mode, rng, layer_idx, probe);
    ++layer_idx;
  }

  x = reshape(x, {b, g2 * g2, cfg.stage2.hidden});
  x = layer_norm(x, bind(w.final_ln.gain), bind(w.final_ln.bias),
                 static_cast<T>(kLayerNormEps));
  auto pooled = mean_axis1(x);
  return linear(pooled, bind(w.head.w), bind(w.head.b));
}

template <typename T>
Var<T> model_forward(Tape<T>& tape, const Tensor<T>& images, ModelWeights<T>& w,
                     const ModelConfig& cfg, Mode mode, Rng* rng = nullptr,
                     MixingProbe<T>* probe = nullptr) {
  Binder<T> bind(tape);
  return model_forward(bind, images, w, cfg, mode, rng, probe);
}

}  // namespace dynamix
