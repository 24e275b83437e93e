#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "dynamix/tensor.hpp"

namespace dynamix {

template <typename T>
class Tape;

/// Handle to a value produced during a forward pass. `node < 0` means the
/// value is not tracked (constant input, or produced with recording off).
template <typename T>
struct Var {
  Tensor<T> value;
  std::int64_t node = -1;
  Tape<T>* tape = nullptr;

  bool tracked() const { return node >= 0 && tape != nullptr; }
  const std::vector<std::size_t>& shape() const { return value.shape(); }
  T scalar() const { return value[0]; }
};

/// Dynamic tape: an append-only record of executed ops. Execution order is
/// topological order, so the backward pass is a single reverse sweep. A tape
/// is confined to one thread; run independent tapes for parallel samples.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  /// When false, ops compute values only and nothing is recorded.
  bool recording = true;

  Var<T> leaf(const Tensor<T>& t) {
    if (recording && t.requires_grad) {
      nodes_.push_back(Node{});
      shapes_.push_back(t.shape());
      return Var<T>{t, static_cast<std::int64_t>(nodes_.size()) - 1, this};
    }
    return Var<T>{t, -1, this};
  }

  Var<T> constant(Tensor<T> t) {
    t.requires_grad = false;
    return Var<T>{std::move(t), -1, this};
  }

  Var<T> emit(Tensor<T> value, Backward backward) {
    nodes_.push_back(Node{std::move(backward)});
    shapes_.push_back(value.shape());
    return Var<T>{std::move(value), static_cast<std::int64_t>(nodes_.size()) - 1, this};
  }

  /// Reverse sweep from a scalar loss. Each recorded node is visited at most
  /// once, in reverse execution order.
  void backward(const Var<T>& loss) {
    if (!loss.tracked() || loss.tape != this) {
      throw contract_error("backward: loss is not tracked on this tape");
    }
    if (loss.value.size() != 1) {
      throw contract_error("backward: loss must be scalar, got shape " +
                           shape_str(loss.value.shape()));
    }
    grads_.assign(nodes_.size(), Tensor<T>{});
    grads_[static_cast<std::size_t>(loss.node)] = Tensor<T>(loss.value.shape(), T(1));
    for (std::int64_t i = loss.node; i >= 0; --i) {
      auto& g = grads_[static_cast<std::size_t>(i)];
      if (g.empty()) continue;
      auto& bwd = nodes_[static_cast<std::size_t>(i)].backward;
      if (bwd) bwd(*this, g);
    }
  }

  /// Accumulate a gradient contribution into a node.
  void accum(std::int64_t node, Tensor<T>&& g) {
    auto& slot = grads_[static_cast<std::size_t>(node)];
    if (g.shape() != shapes_[static_cast<std::size_t>(node)]) {
      throw shape_error("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                        shape_str(shapes_[static_cast<std::size_t>(node)]));
    }
    if (slot.empty()) {
      slot = std::move(g);
      return;
    }
    T* dst = slot.data();
    const T* src = g.data();
    for (std::size_t i = 0; i < slot.size(); ++i) dst[i] += src[i];
  }

  /// Gradient of a tracked value after backward(). Untouched nodes (no path
  /// to the loss) report zeros of the value's shape.
  Tensor<T> grad_of(const Var<T>& v) const {
    if (!v.tracked() || v.tape != this) {
      throw contract_error("grad_of: value is not tracked on this tape");
    }
    const auto idx = static_cast<std::size_t>(v.node);
    if (idx < grads_.size() && !grads_[idx].empty()) return grads_[idx];
    return Tensor<T>(shapes_[idx]);
  }

  std::size_t node_count() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    shapes_.clear();
    grads_.clear();
  }

 private:
  struct Node {
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<std::size_t>> shapes_;
  std::vector<Tensor<T>> grads_;
};

}  // namespace dynamix
