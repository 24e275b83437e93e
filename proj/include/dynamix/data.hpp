#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dynamix/config.hpp"
#include "dynamix/tensor.hpp"

namespace dynamix {

template <typename T>
struct Dataset {
  Tensor<T> images;  // [n, C, H, W], normalized
  std::vector<int> labels;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.extent(1); }
  std::size_t side() const { return images.extent(2); }
};

/// Deterministic separable corpus: class k brightens the k-th patch of the
/// grid on a Gaussian noise background. Labels cycle through the classes, so
/// the histogram is uniform up to one sample.
template <typename T>
Dataset<T> synth_dataset(std::size_t n, std::size_t image_size, std::size_t patch,
                         std::size_t classes, double noise_std, std::uint64_t seed,
                         std::string split = "train") {
  if (patch < 1 || image_size % patch != 0) {
    throw config_error("synth_dataset: image size must be a multiple of the patch size");
  }
  const std::size_t grid = image_size / patch;
  if (classes < 1 || classes > grid * grid) {
    throw config_error("synth_dataset: need 1 <= classes <= " + std::to_string(grid * grid));
  }
  Dataset<T> ds;
  ds.split = std::move(split);
  ds.images = Tensor<T>({n, 3, image_size, image_size});
  Rng rng(seed);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    ds.images[i] = static_cast<T>(rng.normal() * noise_std);
  }
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t label = s % classes;
    ds.labels.push_back(static_cast<int>(label));
    const std::size_t gy = label / grid, gx = label % grid;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t py = 0; py < patch; ++py) {
        for (std::size_t px = 0; px < patch; ++px) {
          ds.images(s, c, gy * patch + py, gx * patch + px) += T(1);
        }
      }
    }
  }
  return ds;
}

inline constexpr double kCifarMean[3] = {0.4914, 0.4822, 0.4465};
inline constexpr double kCifarStd[3] = {0.2470, 0.2435, 0.2616};

namespace detail {

inline std::vector<unsigned char> read_cifar_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw io_error("cannot open CIFAR-10 file: " + path);
  const std::streamsize size = in.tellg();
  constexpr std::streamsize record = 3073;  // 1 label byte + 3 * 1024 pixels
  if (size <= 0 || size % record != 0) {
    throw io_error("malformed CIFAR-10 file (size " + std::to_string(size) +
                   " is not a multiple of 3073): " + path);
  }
  in.seekg(0);
  std::vector<unsigned char> buf(static_cast<std::size_t>(size));
  if (!in.read(reinterpret_cast<char*>(buf.data()), size)) {
    throw io_error("short read on CIFAR-10 file: " + path);
  }
  return buf;
}

template <typename T>
Dataset<T> decode_cifar(const std::vector<std::vector<unsigned char>>& files,
                        const std::vector<std::string>& names, std::string split) {
  constexpr std::size_t record = 3073;
  std::size_t total = 0;
  for (const auto& f : files) total += f.size() / record;
  Dataset<T> ds;
  ds.split = std::move(split);
  ds.images = Tensor<T>({total, 3, 32, 32});
  ds.labels.assign(total, 0);
  std::size_t out = 0;
  for (std::size_t fi = 0; fi < files.size(); ++fi) {
    const auto& buf = files[fi];
    for (std::size_t r = 0; r < buf.size() / record; ++r, ++out) {
      const unsigned char* rec = buf.data() + r * record;
      if (rec[0] > 9) {
        throw io_error("CIFAR-10 label out of range in " + names[fi] + " at record " +
                       std::to_string(r));
      }
      ds.labels[out] = rec[0];
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < 1024; ++p) {
          const double v = static_cast<double>(rec[1 + c * 1024 + p]) / 255.0;
          ds.images[(out * 3 + c) * 1024 + p] =
              static_cast<T>((v - kCifarMean[c]) / kCifarStd[c]);
        }
      }
    }
  }
  return ds;
}

}  // namespace detail

/// Load the binary-format CIFAR-10 batches from `dir` (data_batch_1..5.bin
/// and test_batch.bin). Pixels are scaled to [0, 1] and then standardized
/// per channel, once, at load time.
template <typename T>
std::pair<Dataset<T>, Dataset<T>> load_cifar10(const std::string& dir) {
  std::vector<std::vector<unsigned char>> train_files;
  std::vector<std::string> train_names;
  for (std::size_t b = 1; b <= 5; ++b) {
    const std::string path = dir + "/data_batch_" + std::to_string(b) + ".bin";
    train_files.push_back(detail::read_cifar_bytes(path));
    train_names.push_back(path);
  }
  const std::string test_path = dir + "/test_batch.bin";
  std::vector<std::vector<unsigned char>> val_files{detail::read_cifar_bytes(test_path)};
  return {detail::decode_cifar<T>(train_files, train_names, "train"),
          detail::decode_cifar<T>(val_files, {test_path}, "val")};
}

/// Copy the selected samples into a batch tensor. With augmentation on, each
/// sample gets an independent horizontal flip and a 4-pixel pad-crop shift.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> gather_batch(const Dataset<T>& ds,
                                                    const std::vector<std::size_t>& idx,
                                                    bool augment = false, Rng* rng = nullptr) {
  const std::size_t c = ds.channels(), side = ds.side();
  Tensor<T> batch({idx.size(), c, side, side});
  std::vector<int> labels(idx.size());
  constexpr std::size_t pad = 4;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const std::size_t s = idx[b];
    labels[b] = ds.labels[s];
    bool flip = false;
    std::size_t oy = pad, ox = pad;  // offsets into the padded frame
    if (augment) {
      if (!rng) throw contract_error("gather_batch: augmentation needs an rng");
      flip = rng->uniform() < 0.5;
      oy = rng->index(2 * pad + 1);
      ox = rng->index(2 * pad + 1);
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          // Position in the padded source frame, zero outside.
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + oy) -
                                    static_cast<std::ptrdiff_t>(pad);
          std::ptrdiff_t sx =
              static_cast<std::ptrdiff_t>(x + ox) - static_cast<std::ptrdiff_t>(pad);
          if (flip) sx = static_cast<std::ptrdiff_t>(side - 1) - sx;
          T v = T(0);
          if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(side) && sx >= 0 &&
              sx < static_cast<std::ptrdiff_t>(side)) {
            v = ds.images(s, ch, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
          }
          batch(b, ch, y, x) = v;
        }
      }
    }
  }
  return {std::move(batch), std::move(labels)};
}

}  // namespace dynamix
