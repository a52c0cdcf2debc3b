// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "serval/common.hpp"
#include "serval/rng.hpp"
#include "serval/tensor.hpp"

namespace serval::nn {

/// A named trainable tensor. `trainable=false` freezes it: the optimizer
/// never touches its values. `group_index` is the position of its layer
/// group in last-to-first fine-tune order (0 = classifier head).
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
  int group_index = 0;
};

/// Ordered parameter collection with unique hierarchical names.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(std::string name, Tensor<T> tensor, int group_index = 0) {
    if (index_.count(name)) {
      throw Error("param store: duplicate parameter name '" + name + "'");
    }
    tensor.set_requires_grad(true);
    index_[name] = items_.size();
    items_.push_back(Parameter<T>{std::move(name), std::move(tensor), true,
                                  group_index});
    return items_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name); }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw Error("param store: unknown parameter '" + name + "'");
    }
    return items_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  std::vector<Parameter<T>>& items() { return items_; }
  const std::vector<Parameter<T>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  void zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

  /// Marks exactly the parameters whose group_index is in `groups` as
  /// trainable.
  void set_trainable_groups(const std::vector<int>& groups) {
    for (auto& p : items_) {
      p.trainable = false;
      for (int g : groups) {
        if (p.group_index == g) {
          p.trainable = true;
          break;
        }
      }
    }
  }

 private:
  std::vector<Parameter<T>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// SGD with classical momentum and decoupled-by-name velocity buffers:
///   v <- momentum * v + grad + weight_decay * w
///   w <- w - lr * v
/// Applied only where trainable=true; frozen parameters and their
/// velocities are left untouched.
template <typename T>
class Sgd {
 public:
  Sgd(T momentum, T weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  /// One update over all trainable parameters. `lr_scale`, when set, is
  /// an extra per-parameter multiplier on `lr` (used to train pretrained
  /// groups slower than the head).
  void step(ParamStore<T>& params, T lr,
            const std::function<T(const Parameter<T>&)>& lr_scale = {}) {
    for (auto& p : params.items()) {
      if (!p.trainable) continue;
      if (!p.tensor.has_grad()) {
        throw Error("sgd: missing gradient for trainable parameter '" +
                    p.name + "'");
      }
      T eff_lr = lr_scale ? lr * lr_scale(p) : lr;
      auto& v = velocity_[p.name];
      if (v.empty()) v.assign(static_cast<std::size_t>(p.tensor.size()), T(0));
      auto w = p.tensor.data();
      auto g = p.tensor.grad();
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i] + weight_decay_ * w[i];
        w[i] -= eff_lr * v[i];
      }
    }
  }

  void reset() { velocity_.clear(); }

  const std::unordered_map<std::string, std::vector<T>>& velocities() const {
    return velocity_;
  }

 private:
  T momentum_;
  T weight_decay_;
  std::unordered_map<std::string, std::vector<T>> velocity_;
};

/// Fan-in-scaled Gaussian init for relu stacks: stddev sqrt(2 / fan_in).
template <typename T>
Tensor<T> he_normal_init(Shape shape, int fan_in, Rng& rng) {
  T stddev = std::sqrt(T(2) / static_cast<T>(fan_in));
  auto t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace serval::nn
