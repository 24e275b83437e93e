#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "dynamix/optim.hpp"
#include "dynamix/weights.hpp"

namespace dynamix {

// Checkpoint container: an 8-byte magic, a little-endian u64 manifest
// length, the JSON manifest, then the raw little-endian parameter payload at
// the offsets recorded in the manifest. Saving the result of a load
// reproduces the file byte for byte.

inline constexpr char kCheckpointMagic[8] = {'D', 'Y', 'X', 'C', 'K', 'P', 'T', '1'};

template <typename T>
struct Checkpoint {
  ModelConfig config;
  bool has_train = false;
  TrainConfig train;
  bool has_data = false;
  DataConfig data;
  ModelWeights<T> weights;
  std::int64_t opt_step = -1;  // -1: no optimizer state stored
  std::vector<Tensor<T>> opt_m, opt_v;  // aligned with parameters(weights, config)
};

namespace detail {

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, ModelWeights<T>& weights, const ModelConfig& cfg,
                     const TrainConfig* train_cfg = nullptr,
                     const DataConfig* data_cfg = nullptr, const AdamW<T>* opt = nullptr) {
  struct Entry {
    std::string name;
    const Tensor<T>* tensor;
  };
  std::vector<Entry> entries;
  for_each_param(weights, cfg,
                 [&](const ParamRef<T>& p) { entries.push_back({p.name, p.tensor}); });
  if (opt) {
    const std::size_t n_params = entries.size();
    if (opt->moments_m().size() != n_params) {
      throw checkpoint_error("save_checkpoint: optimizer state does not match the model");
    }
    for (std::size_t i = 0; i < n_params; ++i) {
      entries.push_back({"opt.m." + entries[i].name, &opt->moments_m()[i]});
    }
    for (std::size_t i = 0; i < n_params; ++i) {
      entries.push_back({"opt.v." + entries[i].name, &opt->moments_v()[i]});
    }
  }

  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    tensors.push_back(
        json{{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", offset}});
    offset += e.tensor->size() * sizeof(T);
  }
  json manifest{{"dtype", detail::dtype_name<T>()},
                {"model", cfg.to_json()},
                {"train", train_cfg ? train_cfg->to_json() : json(nullptr)},
                {"data", data_cfg ? data_cfg->to_json() : json(nullptr)},
                {"opt_step", opt ? static_cast<std::int64_t>(opt->steps()) : -1},
                {"tensors", tensors}};
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 8);
  detail::write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : entries) {
    out.write(reinterpret_cast<const char*>(e.tensor->data()),
              static_cast<std::streamsize>(e.tensor->size() * sizeof(T)));
  }
  if (!out) throw io_error("short write on checkpoint: " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw checkpoint_error("not a checkpoint file: " + path);
  }
  const std::uint64_t manifest_len = detail::read_u64(in);
  std::string text(manifest_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(manifest_len));
  if (!in) throw checkpoint_error("truncated checkpoint manifest: " + path);
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw checkpoint_error("unreadable checkpoint manifest: " + std::string(e.what()));
  }

  Checkpoint<T> ck;
  const std::string dtype = manifest.at("dtype").get<std::string>();
  if (dtype != detail::dtype_name<T>()) {
    throw checkpoint_error("checkpoint dtype " + dtype + " does not match this build's " +
                           detail::dtype_name<T>());
  }
  ck.config = ModelConfig::from_json(manifest.at("model"), "/model");
  if (manifest.contains("train") && !manifest.at("train").is_null()) {
    ck.train = TrainConfig::from_json(manifest.at("train"), "/train");
    ck.has_train = true;
  }
  if (manifest.contains("data") && !manifest.at("data").is_null()) {
    ck.data = DataConfig::from_json(manifest.at("data"), "/data");
    ck.has_data = true;
  }
  ck.opt_step = manifest.at("opt_step").get<std::int64_t>();

  ck.weights = build_model<T>(ck.config, 0);
  struct Slot {
    Tensor<T>* tensor;
    bool filled = false;
  };
  std::vector<std::pair<std::string, Slot>> registry;
  for_each_param(ck.weights, ck.config, [&](const ParamRef<T>& p) {
    registry.emplace_back(p.name, Slot{p.tensor});
  });
  const std::size_t n_params = registry.size();
  if (ck.opt_step >= 0) {
    for (std::size_t i = 0; i < n_params; ++i) {
      ck.opt_m.emplace_back(registry[i].second.tensor->shape());
      ck.opt_v.emplace_back(registry[i].second.tensor->shape());
    }
    for (std::size_t i = 0; i < n_params; ++i) {
      registry.emplace_back("opt.m." + registry[i].first, Slot{&ck.opt_m[i]});
    }
    for (std::size_t i = 0; i < n_params; ++i) {
      registry.emplace_back("opt.v." + registry[i].first, Slot{&ck.opt_v[i]});
    }
  }

  std::vector<char> payload(std::istreambuf_iterator<char>(in), {});
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    Slot* slot = nullptr;
    for (auto& [rname, rslot] : registry) {
      if (rname == name) {
        slot = &rslot;
        break;
      }
    }
    if (!slot) {
      throw checkpoint_error("checkpoint tensor '" + name + "' has no place in this config");
    }
    if (slot->tensor->shape() != shape) {
      throw checkpoint_error("checkpoint shape mismatch for '" + name + "': file has " +
                             shape_str(shape) + ", config needs " +
                             shape_str(slot->tensor->shape()));
    }
    const std::uint64_t bytes = slot->tensor->size() * sizeof(T);
    if (offset + bytes > payload.size()) {
      throw checkpoint_error("checkpoint payload truncated at tensor '" + name + "'");
    }
    std::memcpy(slot->tensor->data(), payload.data() + offset, bytes);
    slot->filled = true;
  }
  for (const auto& [name, slot] : registry) {
    if (!slot.filled) {
      throw checkpoint_error("checkpoint is missing tensor '" + name + "'");
    }
  }
  return ck;
}

}  // namespace dynamix
