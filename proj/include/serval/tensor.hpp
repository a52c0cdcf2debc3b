// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "serval/common.hpp"

namespace serval::nn {

/// Dimension list. Images follow the N,C,H,W convention.
using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
class Tensor;

namespace detail {

/// One node of the reverse-mode graph. Tensor is a value-semantics handle
/// to a shared node; ops attach parents and a backward closure to fresh
/// nodes. Closures hold parent handles only (no self handle), so graphs
/// are reference cycles free and die with the episode's root handle.
template <typename T>
struct TensorNode {
  std::vector<T> data;
  Shape shape;
  bool requires_grad = false;
  std::vector<T> grad;  // allocated lazily, only when requires_grad
  std::vector<Tensor<T>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;
};

inline thread_local bool grad_recording_enabled = true;

}  // namespace detail

/// Disables graph recording in the current scope (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_recording_enabled) {
    detail::grad_recording_enabled = false;
  }
  ~NoGradGuard() { detail::grad_recording_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_recording() { return detail::grad_recording_enabled; }

/// N-dimensional numeric array, optionally a node in a reverse-mode
/// autodiff graph. Copying a Tensor copies the handle, not the buffer.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = static_cast<std::size_t>(shape_numel(shape));
    return Tensor(std::vector<T>(n, T(0)), std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::size_t n = static_cast<std::size_t>(shape_numel(shape));
    return Tensor(std::vector<T>(n, value), std::move(shape), requires_grad);
  }

  static Tensor from(std::vector<T> data, Shape shape,
                     bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
      throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    return Tensor(std::move(data), std::move(shape), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(std::vector<T>{value}, Shape{1}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const {
    return static_cast<std::int64_t>(node_->data.size());
  }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  /// Value of a single-element tensor.
  T item() const {
    if (size() != 1) {
      throw ShapeError("item: tensor has " + std::to_string(size()) +
                       " elements, expected 1");
    }
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  void set_requires_grad(bool value) {
    node_->requires_grad = value;
    if (!value) {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }

  bool has_grad() const { return !node_->grad.empty(); }

  /// Gradient buffer; allocated zero-filled on first access.
  /// Never allocated for tensors with requires_grad=false.
  std::span<T> grad() {
    ensure_grad();
    return node_->grad;
  }
  std::span<const T> grad() const {
    const_cast<Tensor*>(this)->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) {
      std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }
  }

  void accumulate_grad(std::span<const T> g) {
    if (!node_->requires_grad) return;
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) node_->grad[i] += g[i];
  }

  /// Runs reverse-mode accumulation from this scalar. Every reachable
  /// requires_grad tensor receives (accumulates) its gradient; repeated
  /// calls without zero_grad accumulate further.
  void backward() {
    if (size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(shape()));
    }
    ensure_grad();
    node_->grad[0] += T(1);

    std::vector<detail::TensorNode<T>*> order = topo_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::TensorNode<T>* n = *it;
      if (n->backward_fn) n->backward_fn(*n);
    }
  }

  // --- graph construction, used by ops ---

  void attach(std::vector<Tensor<T>> parents,
              std::function<void(detail::TensorNode<T>&)> backward_fn) {
    node_->requires_grad = true;
    node_->parents = std::move(parents);
    node_->backward_fn = std::move(backward_fn);
  }

  /// True when this op invocation should record the graph.
  template <typename... Ts>
  static bool recording(const Ts&... inputs) {
    return grad_recording() && (inputs.requires_grad() || ...);
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  /// Deep copy of the value buffer; detached from any graph.
  Tensor clone_detached() const {
    return Tensor(node_->data, node_->shape, false);
  }

 private:
  Tensor(std::vector<T> data, Shape shape, bool requires_grad)
      : node_(std::make_shared<detail::TensorNode<T>>()) {
    node_->data = std::move(data);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  void ensure_grad() {
    if (!node_->requires_grad) {
      throw Error("grad: tensor does not require gradients");
    }
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  }

  std::vector<detail::TensorNode<T>*> topo_order() {
    std::vector<detail::TensorNode<T>*> order;
    std::unordered_set<detail::TensorNode<T>*> seen;
    // Iterative DFS; the stack holds (node, next-parent-index).
    std::vector<std::pair<detail::TensorNode<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        detail::TensorNode<T>* p = n->parents[idx].node_.get();
        ++idx;
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;  // parents before children; reverse-iterated by caller
  }

  std::shared_ptr<detail::TensorNode<T>> node_;
};

/// Text rendering of a tensor as nested H x W grids, for test fixtures
/// and debugging.
template <typename T>
std::string to_text_grid(const Tensor<T>& t, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  const Shape& s = t.shape();
  os << "shape " << shape_str(s) << "\n";
  auto data = t.data();
  if (s.size() <= 1) {
    for (std::int64_t i = 0; i < t.size(); ++i) {
      if (i) os << " ";
      os << data[static_cast<std::size_t>(i)];
    }
    os << "\n";
    return os.str();
  }
  int w = s.back();
  int h = s[s.size() - 2];
  std::int64_t planes = t.size() / (static_cast<std::int64_t>(w) * h);
  std::size_t idx = 0;
  for (std::int64_t p = 0; p < planes; ++p) {
    if (planes > 1) os << "plane " << p << ":\n";
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        if (c) os << " ";
        os << data[idx++];
      }
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace serval::nn
