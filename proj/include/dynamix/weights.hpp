#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dynamix/config.hpp"
#include "dynamix/tensor.hpp"

namespace dynamix {

template <typename T>
struct LinearW {
  Tensor<T> w;
  Tensor<T> b;
};

template <typename T>
struct LayerNormW {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct ReweightW {
  Tensor<T> w1;  // [D, D/4]
  Tensor<T> w2;  // [D/4, k*D] for k fused branches
};

/// Weights of one token-mixing operation over N tokens of D channels.
/// Dynamic: per-segment reduction maps (D x d), one weight generator shared
/// across segments ((N*d) x (N*N), logit row i in column block i) and a D x D
/// output fusion matrix. No biases anywhere in this operation.
template <typename T>
struct DynaMixerOpWeights {
  MixGenKind kind = MixGenKind::Dynamic;
  std::size_t tokens = 0;    // N
  std::size_t channels = 0;  // D
  std::size_t segments = 1;  // S
  std::size_t reduced = 1;   // d

  std::vector<Tensor<T>> reduce;  // Dynamic: S x [D, d]
  Tensor<T> gen;                  // Dynamic: [N*d, N*N]
  std::vector<Tensor<T>> dense;   // DensePerToken: S x [D, N]
  Tensor<T> mix;                  // StaticRandom: [N, N]
  Tensor<T> out_fuse;             // [D, D]

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& t : reduce) n += t.size();
    if (!gen.empty()) n += gen.size();
    for (const auto& t : dense) n += t.size();
    if (!mix.empty()) n += mix.size();
    if (!out_fuse.empty()) n += out_fuse.size();
    return n;
  }
};

template <typename T>
struct BlockWeights {
  std::optional<DynaMixerOpWeights<T>> row_op;
  std::optional<DynaMixerOpWeights<T>> col_op;  // shares row_op storage when configured
  std::optional<LinearW<T>> proj_c;
  LinearW<T> proj_o;
  std::optional<ReweightW<T>> reweight;
};

template <typename T>
struct MixerLayerWeights {
  LayerNormW<T> ln1;
  BlockWeights<T> block;
  LayerNormW<T> ln2;
  LinearW<T> fc1;
  LinearW<T> fc2;
};

template <typename T>
struct ModelWeights {
  LinearW<T> embed1;
  std::vector<MixerLayerWeights<T>> stage1;
  LinearW<T> embed2;
  std::vector<MixerLayerWeights<T>> stage2;
  LayerNormW<T> final_ln;
  LinearW<T> head;
};

enum class ParamKind { Weight, Bias, Gain };

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
  ParamKind kind;

  /// Weight decay applies to matrices only.
  bool decay() const { return kind == ParamKind::Weight; }
};

namespace detail {

template <typename T>
Tensor<T> param_tensor(std::vector<std::size_t> shape) {
  Tensor<T> t(std::move(shape));
  t.requires_grad = true;
  return t;
}

template <typename T>
DynaMixerOpWeights<T> make_op_weights(MixGenKind kind, std::size_t n, std::size_t d_channels,
                                      std::size_t s, std::size_t d_reduced) {
  DynaMixerOpWeights<T> w;
  w.kind = kind;
  w.tokens = n;
  w.channels = d_channels;
  w.segments = s;
  w.reduced = d_reduced;
  switch (kind) {
    case MixGenKind::Dynamic:
      for (std::size_t i = 0; i < s; ++i) {
        w.reduce.push_back(param_tensor<T>({d_channels, d_reduced}));
      }
      w.gen = param_tensor<T>({n * d_reduced, n * n});
      break;
    case MixGenKind::DensePerToken:
      for (std::size_t i = 0; i < s; ++i) w.dense.push_back(param_tensor<T>({d_channels, n}));
      break;
    case MixGenKind::StaticRandom:
      w.mix = param_tensor<T>({n, n});
      break;
  }
  w.out_fuse = param_tensor<T>({d_channels, d_channels});
  return w;
}

template <typename T, typename F>
void visit_op_params(DynaMixerOpWeights<T>& op, const std::string& prefix, F&& f) {
  for (std::size_t s = 0; s < op.reduce.size(); ++s) {
    f(ParamRef<T>{prefix + ".reduce." + std::to_string(s), &op.reduce[s], ParamKind::Weight});
  }
  if (!op.gen.empty()) f(ParamRef<T>{prefix + ".gen", &op.gen, ParamKind::Weight});
  for (std::size_t s = 0; s < op.dense.size(); ++s) {
    f(ParamRef<T>{prefix + ".dense." + std::to_string(s), &op.dense[s], ParamKind::Weight});
  }
  if (!op.mix.empty()) f(ParamRef<T>{prefix + ".mix", &op.mix, ParamKind::Weight});
  f(ParamRef<T>{prefix + ".fuse", &op.out_fuse, ParamKind::Weight});
}

template <typename T, typename F>
void visit_layer_params(MixerLayerWeights<T>& layer, const ModelConfig& cfg,
                        const std::string& prefix, F&& f) {
  f(ParamRef<T>{prefix + ".ln1.gain", &layer.ln1.gain, ParamKind::Gain});
  f(ParamRef<T>{prefix + ".ln1.bias", &layer.ln1.bias, ParamKind::Bias});
  if (layer.block.row_op) visit_op_params(*layer.block.row_op, prefix + ".block.row", f);
  if (layer.block.col_op && !cfg.share_row_col) {
    visit_op_params(*layer.block.col_op, prefix + ".block.col", f);
  }
  if (layer.block.proj_c) {
    f(ParamRef<T>{prefix + ".block.proj_c.w", &layer.block.proj_c->w, ParamKind::Weight});
    f(ParamRef<T>{prefix + ".block.proj_c.b", &layer.block.proj_c->b, ParamKind::Bias});
  }
  f(ParamRef<T>{prefix + ".block.proj_o.w", &layer.block.proj_o.w, ParamKind::Weight});
  f(ParamRef<T>{prefix + ".block.proj_o.b", &layer.block.proj_o.b, ParamKind::Bias});
  if (layer.block.reweight) {
    f(ParamRef<T>{prefix + ".block.reweight.w1", &layer.block.reweight->w1, ParamKind::Weight});
    f(ParamRef<T>{prefix + ".block.reweight.w2", &layer.block.reweight->w2, ParamKind::Weight});
  }
  f(ParamRef<T>{prefix + ".ln2.gain", &layer.ln2.gain, ParamKind::Gain});
  f(ParamRef<T>{prefix + ".ln2.bias", &layer.ln2.bias, ParamKind::Bias});
  f(ParamRef<T>{prefix + ".mlp.fc1.w", &layer.fc1.w, ParamKind::Weight});
  f(ParamRef<T>{prefix + ".mlp.fc1.b", &layer.fc1.b, ParamKind::Bias});
  f(ParamRef<T>{prefix + ".mlp.fc2.w", &layer.fc2.w, ParamKind::Weight});
  f(ParamRef<T>{prefix + ".mlp.fc2.b", &layer.fc2.b, ParamKind::Bias});
}

}  // namespace detail

/// Visit every parameter tensor in a stable, documented order:
/// embed1, stage1 layers, embed2, stage2 layers, final_ln, head. Within a
/// layer: ln1, block (row, col, proj_c, proj_o, reweight), ln2, mlp. The
/// column op is skipped when it shares the row op's storage.
template <typename T, typename F>
void for_each_param(ModelWeights<T>& w, const ModelConfig& cfg, F&& f) {
  f(ParamRef<T>{"stage1.embed.w", &w.embed1.w, ParamKind::Weight});
  f(ParamRef<T>{"stage1.embed.b", &w.embed1.b, ParamKind::Bias});
  for (std::size_t i = 0; i < w.stage1.size(); ++i) {
    detail::visit_layer_params(w.stage1[i], cfg, "stage1.layer" + std::to_string(i), f);
  }
  f(ParamRef<T>{"stage2.embed.w", &w.embed2.w, ParamKind::Weight});
  f(ParamRef<T>{"stage2.embed.b", &w.embed2.b, ParamKind::Bias});
  for (std::size_t i = 0; i < w.stage2.size(); ++i) {
    detail::visit_layer_params(w.stage2[i], cfg, "stage2.layer" + std::to_string(i), f);
  }
  f(ParamRef<T>{"final_ln.gain", &w.final_ln.gain, ParamKind::Gain});
  f(ParamRef<T>{"final_ln.bias", &w.final_ln.bias, ParamKind::Bias});
  f(ParamRef<T>{"head.w", &w.head.w, ParamKind::Weight});
  f(ParamRef<T>{"head.b", &w.head.b, ParamKind::Bias});
}

template <typename T>
std::vector<ParamRef<T>> parameters(ModelWeights<T>& w, const ModelConfig& cfg) {
  std::vector<ParamRef<T>> out;
  for_each_param(w, cfg, [&](const ParamRef<T>& p) { out.push_back(p); });
  return out;
}

template <typename T>
std::size_t parameter_count(ModelWeights<T>& w, const ModelConfig& cfg) {
  std::size_t n = 0;
  for_each_param(w, cfg, [&](const ParamRef<T>& p) { n += p.tensor->size(); });
  return n;
}

namespace detail {

template <typename T>
MixerLayerWeights<T> make_layer(const ModelConfig& cfg, std::size_t grid, std::size_t hidden,
                                std::size_t segments) {
  MixerLayerWeights<T> layer;
  layer.ln1 = {param_tensor<T>({hidden}), param_tensor<T>({hidden})};
  if (!cfg.disable_row) {
    layer.block.row_op =
        make_op_weights<T>(cfg.gen_kind, grid, hidden, segments, cfg.reduced_dim);
  }
  if (!cfg.disable_col) {
    if (cfg.share_row_col) {
      layer.block.col_op = layer.block.row_op;  // shared storage
    } else {
      layer.block.col_op =
          make_op_weights<T>(cfg.gen_kind, grid, hidden, segments, cfg.reduced_dim);
    }
  }
  if (!cfg.disable_channel) {
    layer.block.proj_c = LinearW<T>{param_tensor<T>({hidden, hidden}), param_tensor<T>({hidden})};
  }
  layer.block.proj_o = {param_tensor<T>({hidden, hidden}), param_tensor<T>({hidden})};
  if (!cfg.disable_reweight) {
    const std::size_t k = cfg.enabled_branches();
    layer.block.reweight =
        ReweightW<T>{param_tensor<T>({hidden, hidden / 4}),
                     param_tensor<T>({hidden / 4, k * hidden})};
  }
  layer.ln2 = {param_tensor<T>({hidden}), param_tensor<T>({hidden})};
  layer.fc1 = {param_tensor<T>({hidden, cfg.mlp_ratio * hidden}),
               param_tensor<T>({cfg.mlp_ratio * hidden})};
  layer.fc2 = {param_tensor<T>({cfg.mlp_ratio * hidden, hidden}), param_tensor<T>({hidden})};
  return layer;
}

}  // namespace detail

/// Allocate and initialize model weights. Matrices get truncated-normal init
/// (std 0.02, resampled beyond 2 std), biases zero, norm gains one. The same
/// seed always produces bit-identical weights.
template <typename T>
ModelWeights<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelWeights<T> w;
  const std::size_t d1 = cfg.stage1.hidden, d2 = cfg.stage2.hidden;
  const std::size_t patch_dim = cfg.stage1.patch_size * cfg.stage1.patch_size * cfg.in_channels;
  w.embed1 = {detail::param_tensor<T>({patch_dim, d1}), detail::param_tensor<T>({d1})};
  for (std::size_t i = 0; i < cfg.stage1.depth; ++i) {
    w.stage1.push_back(detail::make_layer<T>(cfg, cfg.grid1(), d1, cfg.stage1.segments));
  }
  const std::size_t merge_dim = cfg.stage2.patch_size * cfg.stage2.patch_size * d1;
  w.embed2 = {detail::param_tensor<T>({merge_dim, d2}), detail::param_tensor<T>({d2})};
  for (std::size_t i = 0; i < cfg.stage2.depth; ++i) {
    w.stage2.push_back(detail::make_layer<T>(cfg, cfg.grid2(), d2, cfg.stage2.segments));
  }
  w.final_ln = {detail::param_tensor<T>({d2}), detail::param_tensor<T>({d2})};
  w.head = {detail::param_tensor<T>({d2, cfg.num_classes}),
            detail::param_tensor<T>({cfg.num_classes})};

  Rng rng(seed);
  for_each_param(w, cfg, [&](const ParamRef<T>& p) {
    Tensor<T>& t = *p.tensor;
    switch (p.kind) {
      case ParamKind::Weight:
        for (std::size_t i = 0; i < t.size(); ++i) {
          t[i] = static_cast<T>(rng.trunc_normal(0.02, 2.0));
        }
        break;
      case ParamKind::Bias:
        t.fill(T(0));
        break;
      case ParamKind::Gain:
        t.fill(T(1));
        break;
    }
  });
  return w;
}

}  // namespace dynamix
