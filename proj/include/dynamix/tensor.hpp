#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <type_traits>
#include <utility>
#include <vector>

#include "dynamix/common.hpp"

namespace dynamix {

/// Dense row-major tensor. Storage is shared between copies; ops never write
/// their inputs, so sharing is safe. Use clone() for an independent buffer.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor requires float or double");

 public:
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(checked_numel(shape_), fill)) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (checked_numel(shape_) != data_->size()) {
      throw shape_error("tensor data length " + std::to_string(data_->size()) +
                        " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  bool empty() const { return data_ == nullptr; }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t rank() const { return shape_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }

  T& operator[](std::size_t i) { return (*data_)[i]; }
  const T& operator[](std::size_t i) const { return (*data_)[i]; }

  template <typename... Ix>
  T& operator()(Ix... ix) {
    return (*data_)[offset_of({static_cast<std::size_t>(ix)...})];
  }
  template <typename... Ix>
  const T& operator()(Ix... ix) const {
    return (*data_)[offset_of({static_cast<std::size_t>(ix)...})];
  }

  /// Deep copy with its own storage.
  Tensor clone() const {
    if (empty()) return {};
    Tensor out(shape_, *data_);
    out.requires_grad = requires_grad;
    return out;
  }

  /// Same storage, new shape. The element count must be unchanged.
  Tensor reshaped(std::vector<std::size_t> shape) const {
    if (checked_numel(shape) != size()) {
      throw shape_error("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    out.requires_grad = requires_grad;
    return out;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool shares_storage(const Tensor& other) const { return data_ && data_ == other.data_; }

  void fill(T v) { std::fill(data_->begin(), data_->end(), v); }

  bool all_finite() const {
    for (const T& v : *data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw shape_error("tensor rank must be >= 1");
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e < 1) throw shape_error("tensor extents must be >= 1, got " + shape_str(shape));
      n *= e;
    }
    return n;
  }

  std::size_t offset_of(std::initializer_list<std::size_t> ix) const {
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : ix) {
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  std::vector<std::size_t> shape_;
  std::shared_ptr<std::vector<T>> data_;
};

inline std::size_t numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

template <typename T>
Tensor<T> randn(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal() * stddev);
  return t;
}

}  // namespace dynamix
