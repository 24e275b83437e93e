#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dynamix/common.hpp"

namespace dynamix {

using json = nlohmann::json;

/// How the token mixing matrices are produced.
///  - Dynamic:       generated from the contents of all tokens, via per-segment
///                   dimensionality reduction and a shared weight generator.
///  - DensePerToken: row i of each matrix comes from token i's features alone.
///  - StaticRandom:  a learnable matrix shared across segments, used raw and
///                   identical for every input.
enum class MixGenKind { Dynamic, DensePerToken, StaticRandom };

inline std::string to_string(MixGenKind k) {
  switch (k) {
    case MixGenKind::Dynamic: return "dynamic";
    case MixGenKind::DensePerToken: return "dense";
    case MixGenKind::StaticRandom: return "static";
  }
  return "dynamic";
}

inline MixGenKind mix_gen_kind_from(const std::string& s, const std::string& path) {
  if (s == "dynamic") return MixGenKind::Dynamic;
  if (s == "dense") return MixGenKind::DensePerToken;
  if (s == "static") return MixGenKind::StaticRandom;
  throw config_error(path + ": unknown generator kind '" + s +
                     "' (expected dynamic|dense|static)");
}

struct StageConfig {
  std::size_t patch_size = 7;
  std::size_t hidden = 192;
  std::size_t depth = 4;
  std::size_t segments = 8;
};

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t in_channels = 3;
  StageConfig stage1{7, 192, 4, 8};
  StageConfig stage2{2, 384, 14, 16};
  std::size_t reduced_dim = 2;
  std::size_t mlp_ratio = 3;
  std::size_t num_classes = 1000;
  double stoch_depth = 0.1;

  bool disable_row = false;
  bool disable_col = false;
  bool disable_channel = false;
  bool disable_reweight = false;
  bool share_row_col = false;
  MixGenKind gen_kind = MixGenKind::Dynamic;

  std::size_t grid1() const { return image_size / stage1.patch_size; }
  std::size_t grid2() const { return grid1() / stage2.patch_size; }
  std::size_t total_depth() const { return stage1.depth + stage2.depth; }

  /// Number of mixing branches fused in each block (row, column, channel).
  std::size_t enabled_branches() const {
    return (disable_row ? 0u : 1u) + (disable_col ? 0u : 1u) + (disable_channel ? 0u : 1u);
  }

  void validate() const {
    std::vector<std::string> faults;
    if (image_size < 1 || stage1.patch_size < 1 || image_size % stage1.patch_size != 0) {
      faults.push_back("image_size must be a multiple of the stage-1 patch size");
    } else if (stage2.patch_size < 1 || grid1() % stage2.patch_size != 0) {
      faults.push_back("the stage-1 grid must be a multiple of the stage-2 patch size");
    }
    if (in_channels < 1) faults.push_back("in_channels must be >= 1");
    if (stage1.depth < 1 || stage2.depth < 1) faults.push_back("stage depths must be >= 1");
    if (stage1.segments < 1 || stage1.hidden % stage1.segments != 0) {
      faults.push_back("stage-1 hidden size must be divisible by its segment count");
    }
    if (stage2.segments < 1 || stage2.hidden % stage2.segments != 0) {
      faults.push_back("stage-2 hidden size must be divisible by its segment count");
    }
    if (reduced_dim < 1) faults.push_back("reduced_dim must be >= 1");
    if (mlp_ratio < 1) faults.push_back("mlp_ratio must be >= 1");
    if (num_classes < 2) faults.push_back("num_classes must be >= 2");
    if (!(stoch_depth >= 0.0 && stoch_depth <= 1.0)) {
      faults.push_back("stoch_depth must be in [0, 1]");
    }
    if (!disable_reweight && (stage1.hidden < 4 || stage2.hidden < 4)) {
      faults.push_back("reweighting needs hidden size >= 4 for its bottleneck");
    }
    if (disable_row && disable_col && disable_channel) {
      faults.push_back("at least one of the row/column/channel branches must stay enabled");
    }
    if (share_row_col && (disable_row || disable_col)) {
      faults.push_back("share_row_col requires both the row and column branches");
    }
    if (!faults.empty()) {
      std::string msg = "invalid model config:";
      for (const auto& f : faults) msg += "\n  - " + f;
      throw config_error(msg);
    }
  }

  static ModelConfig preset(const std::string& name);

  json to_json() const;
  static ModelConfig from_json(const json& j, const std::string& path);
};

struct TrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 32;
  double base_lr = 0.002;
  double weight_decay = 0.05;
  double warmup_start_lr = 1e-6;
  std::size_t warmup_epochs = 1;
  double label_smoothing = 0.1;
  std::uint64_t seed = 42;
  std::string checkpoint_dir;
  std::size_t max_steps = 0;  // 0: bounded by epochs only
  std::size_t log_every = 1;
  bool deterministic = true;

  void validate() const {
    std::vector<std::string> faults;
    if (epochs < 1) faults.push_back("epochs must be >= 1");
    if (batch_size < 1) faults.push_back("batch_size must be >= 1");
    if (base_lr < 0 || weight_decay < 0 || warmup_start_lr < 0) {
      faults.push_back("rates must be >= 0");
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
      faults.push_back("label_smoothing must be in [0, 1)");
    }
    if (log_every < 1) faults.push_back("log_every must be >= 1");
    if (!faults.empty()) {
      std::string msg = "invalid train config:";
      for (const auto& f : faults) msg += "\n  - " + f;
      throw config_error(msg);
    }
  }

  json to_json() const;
  static TrainConfig from_json(const json& j, const std::string& path);
};

struct SynthConfig {
  std::size_t n_train = 2048;
  std::size_t n_val = 512;
  double noise_std = 0.1;
};

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | cifar10
  std::string dir;
  SynthConfig synth;

  void validate() const {
    if (kind != "synthetic" && kind != "cifar10") {
      throw config_error("data.kind must be 'synthetic' or 'cifar10', got '" + kind + "'");
    }
  }

  json to_json() const;
  static DataConfig from_json(const json& j, const std::string& path);
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
  }

  json to_json() const;
  static RunConfig from_json(const json& j);
  static RunConfig preset(const std::string& name);
};

namespace detail {

inline void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw config_error(path + ": expected an object");
}

inline void reject_unknown_keys(const json& j, const std::string& path,
                                const std::set<std::string>& allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw config_error(path + "/" + it.key() + ": unknown key");
    }
  }
}

template <typename T>
T get_or(const json& j, const std::string& key, const T& fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw config_error(path + "/" + key + ": wrong value type");
  }
}

}  // namespace detail

inline json stage_to_json(const StageConfig& s) {
  return json{{"patch_size", s.patch_size},
              {"hidden", s.hidden},
              {"depth", s.depth},
              {"segments", s.segments}};
}

inline StageConfig stage_from_json(const json& j, const std::string& path) {
  detail::expect_object(j, path);
  detail::reject_unknown_keys(j, path, {"patch_size", "hidden", "depth", "segments"});
  StageConfig s;
  s.patch_size = detail::get_or<std::size_t>(j, "patch_size", s.patch_size, path);
  s.hidden = detail::get_or<std::size_t>(j, "hidden", s.hidden, path);
  s.depth = detail::get_or<std::size_t>(j, "depth", s.depth, path);
  s.segments = detail::get_or<std::size_t>(j, "segments", s.segments, path);
  return s;
}

inline json ModelConfig::to_json() const {
  return json{{"image_size", image_size},
              {"in_channels", in_channels},
              {"stage1", stage_to_json(stage1)},
              {"stage2", stage_to_json(stage2)},
              {"reduced_dim", reduced_dim},
              {"mlp_ratio", mlp_ratio},
              {"num_classes", num_classes},
              {"stoch_depth", stoch_depth},
              {"disable_row", disable_row},
              {"disable_col", disable_col},
              {"disable_channel", disable_channel},
              {"disable_reweight", disable_reweight},
              {"share_row_col", share_row_col},
              {"gen_kind", to_string(gen_kind)}};
}

inline ModelConfig ModelConfig::from_json(const json& j, const std::string& path) {
  detail::expect_object(j, path);
  detail::reject_unknown_keys(
      j, path,
      {"image_size", "in_channels", "stage1", "stage2", "reduced_dim", "mlp_ratio", "num_classes",
       "stoch_depth", "disable_row", "disable_col", "disable_channel", "disable_reweight",
       "share_row_col", "gen_kind"});
  ModelConfig c;
  c.image_size = detail::get_or<std::size_t>(j, "image_size", c.image_size, path);
  c.in_channels = detail::get_or<std::size_t>(j, "in_channels", c.in_channels, path);
  if (j.contains("stage1")) c.stage1 = stage_from_json(j.at("stage1"), path + "/stage1");
  if (j.contains("stage2")) c.stage2 = stage_from_json(j.at("stage2"), path + "/stage2");
  c.reduced_dim = detail::get_or<std::size_t>(j, "reduced_dim", c.reduced_dim, path);
  c.mlp_ratio = detail::get_or<std::size_t>(j, "mlp_ratio", c.mlp_ratio, path);
  c.num_classes = detail::get_or<std::size_t>(j, "num_classes", c.num_classes, path);
  c.stoch_depth = detail::get_or<double>(j, "stoch_depth", c.stoch_depth, path);
  c.disable_row = detail::get_or<bool>(j, "disable_row", c.disable_row, path);
  c.disable_col = detail::get_or<bool>(j, "disable_col", c.disable_col, path);
  c.disable_channel = detail::get_or<bool>(j, "disable_channel", c.disable_channel, path);
  c.disable_reweight = detail::get_or<bool>(j, "disable_reweight", c.disable_reweight, path);
  c.share_row_col = detail::get_or<bool>(j, "share_row_col", c.share_row_col, path);
  if (j.contains("gen_kind")) {
    c.gen_kind = mix_gen_kind_from(detail::get_or<std::string>(j, "gen_kind", "dynamic", path),
                                   path + "/gen_kind");
  }
  return c;
}

inline ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "dynamixer-s") {
    c.stage1 = {7, 192, 4, 8};
    c.stage2 = {2, 384, 14, 16};
    c.reduced_dim = 2;
    c.stoch_depth = 0.1;
  } else if (name == "dynamixer-m") {
    c.stage1 = {7, 256, 7, 8};
    c.stage2 = {2, 512, 17, 16};
    c.reduced_dim = 2;
    c.stoch_depth = 0.1;
  } else if (name == "dynamixer-l") {
    c.stage1 = {7, 256, 8, 8};
    c.stage2 = {2, 512, 28, 16};
    c.reduced_dim = 8;
    c.stoch_depth = 0.3;
  } else if (name == "tiny") {
    c.image_size = 32;
    c.stage1 = {8, 8, 1, 2};
    c.stage2 = {2, 16, 1, 2};
    c.reduced_dim = 1;
    c.num_classes = 10;
    c.stoch_depth = 0.1;
  } else {
    throw config_error("unknown preset '" + name +
                       "' (expected dynamixer-s|dynamixer-m|dynamixer-l|tiny)");
  }
  return c;
}

inline json TrainConfig::to_json() const {
  return json{{"epochs", epochs},
              {"batch_size", batch_size},
              {"base_lr", base_lr},
              {"weight_decay", weight_decay},
              {"warmup_start_lr", warmup_start_lr},
              {"warmup_epochs", warmup_epochs},
              {"label_smoothing", label_smoothing},
              {"seed", seed},
              {"checkpoint_dir", checkpoint_dir},
              {"max_steps", max_steps},
              {"log_every", log_every},
              {"deterministic", deterministic}};
}

inline TrainConfig TrainConfig::from_json(const json& j, const std::string& path) {
  detail::expect_object(j, path);
  detail::reject_unknown_keys(j, path,
                              {"epochs", "batch_size", "base_lr", "weight_decay",
                               "warmup_start_lr", "warmup_epochs", "label_smoothing", "seed",
                               "checkpoint_dir", "max_steps", "log_every", "deterministic"});
  TrainConfig c;
  c.epochs = detail::get_or<std::size_t>(j, "epochs", c.epochs, path);
  c.batch_size = detail::get_or<std::size_t>(j, "batch_size", c.batch_size, path);
  c.base_lr = detail::get_or<double>(j, "base_lr", c.base_lr, path);
  c.weight_decay = detail::get_or<double>(j, "weight_decay", c.weight_decay, path);
  c.warmup_start_lr = detail::get_or<double>(j, "warmup_start_lr", c.warmup_start_lr, path);
  c.warmup_epochs = detail::get_or<std::size_t>(j, "warmup_epochs", c.warmup_epochs, path);
  c.label_smoothing = detail::get_or<double>(j, "label_smoothing", c.label_smoothing, path);
  c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed, path);
  c.checkpoint_dir = detail::get_or<std::string>(j, "checkpoint_dir", c.checkpoint_dir, path);
  c.max_steps = detail::get_or<std::size_t>(j, "max_steps", c.max_steps, path);
  c.log_every = detail::get_or<std::size_t>(j, "log_every", c.log_every, path);
  c.deterministic = detail::get_or<bool>(j, "deterministic", c.deterministic, path);
  return c;
}

inline json DataConfig::to_json() const {
  return json{{"kind", kind},
              {"dir", dir},
              {"synth", json{{"n_train", synth.n_train},
                             {"n_val", synth.n_val},
                             {"noise_std", synth.noise_std}}}};
}

inline DataConfig DataConfig::from_json(const json& j, const std::string& path) {
  detail::expect_object(j, path);
  detail::reject_unknown_keys(j, path, {"kind", "dir", "synth"});
  DataConfig c;
  c.kind = detail::get_or<std::string>(j, "kind", c.kind, path);
  c.dir = detail::get_or<std::string>(j, "dir", c.dir, path);
  if (j.contains("synth")) {
    const json& s = j.at("synth");
    detail::expect_object(s, path + "/synth");
    detail::reject_unknown_keys(s, path + "/synth", {"n_train", "n_val", "noise_std"});
    c.synth.n_train = detail::get_or<std::size_t>(s, "n_train", c.synth.n_train, path + "/synth");
    c.synth.n_val = detail::get_or<std::size_t>(s, "n_val", c.synth.n_val, path + "/synth");
    c.synth.noise_std = detail::get_or<double>(s, "noise_std", c.synth.noise_std, path + "/synth");
  }
  return c;
}

inline json RunConfig::to_json() const {
  return json{{"model", model.to_json()}, {"train", train.to_json()}, {"data", data.to_json()}};
}

inline RunConfig RunConfig::from_json(const json& j) {
  detail::expect_object(j, "");
  detail::reject_unknown_keys(j, "", {"model", "train", "data"});
  RunConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"), "/model");
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"), "/train");
  if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"), "/data");
  return c;
}

inline RunConfig RunConfig::preset(const std::string& name) {
  RunConfig c;
  c.model = ModelConfig::preset(name);
  if (name == "dynamixer-s") {
    c.train.batch_size = 256;
    c.train.epochs = 300;
    c.train.warmup_epochs = 5;
  } else if (name == "dynamixer-m") {
    c.train.batch_size = 128;
    c.train.epochs = 300;
    c.train.warmup_epochs = 5;
  } else if (name == "dynamixer-l") {
    c.train.batch_size = 64;
    c.train.epochs = 300;
    c.train.warmup_epochs = 5;
  } else {  // tiny
    c.train.batch_size = 32;
    c.train.epochs = 8;
    c.train.warmup_epochs = 1;
  }
  return c;
}

}  // namespace dynamix
