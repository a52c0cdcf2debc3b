// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "serval/common.hpp"
#include "serval/ops.hpp"
#include "serval/optim.hpp"
#include "serval/rng.hpp"
#include "serval/tensor.hpp"

namespace serval::nn {

/// The four convolutional families, each reduced to its defining
/// mechanism: a plain stack with a wide stem and fc classifier, a
/// small-filter stack, parallel-branch inception blocks, and residual
/// blocks with shortcut connections.
enum class Family {
  PlainAlexnetStyle,
  SmallFilterVggStyle,
  InceptionStyle,
  ResidualStyle,
};

inline std::string family_to_string(Family f) {
  switch (f) {
    case Family::PlainAlexnetStyle: return "plain-alexnet-style";
    case Family::SmallFilterVggStyle: return "small-filter-vgg-style";
    case Family::InceptionStyle: return "inception-style";
    case Family::ResidualStyle: return "residual-style";
  }
  throw Error("family_to_string: invalid family value");
}

inline Family family_from_string(const std::string& s) {
  if (s == "plain-alexnet-style") return Family::PlainAlexnetStyle;
  if (s == "small-filter-vgg-style") return Family::SmallFilterVggStyle;
  if (s == "inception-style") return Family::InceptionStyle;
  if (s == "residual-style") return Family::ResidualStyle;
  throw ConfigError(
      "unknown architecture family '" + s +
      "' (expected plain-alexnet-style, small-filter-vgg-style, "
      "inception-style, or residual-style)");
}

struct ArchitectureSpec {
  Family family = Family::ResidualStyle;
  int depth_units = 3;
  int input_side = 64;
  int input_channels = 3;
  int num_classes = 26;
  double dropout_p = 0.0;
  int width_base = 8;
};

inline void validate_architecture(const ArchitectureSpec& s) {
  if (s.depth_units < 1) {
    throw ConfigError("architecture: depth_units must be >= 1, got " +
                      std::to_string(s.depth_units));
  }
  if (s.num_classes < 2) {
    throw ConfigError("architecture: num_classes must be >= 2, got " +
                      std::to_string(s.num_classes));
  }
  if (s.input_side < 1 || s.input_channels < 1) {
    throw ConfigError("architecture: input_side and input_channels must be "
                      "positive");
  }
  if (s.width_base < 4) {
    throw ConfigError("architecture: width_base must be >= 4, got " +
                      std::to_string(s.width_base));
  }
  if (s.dropout_p < 0.0 || s.dropout_p >= 1.0) {
    throw ConfigError("architecture: dropout_p must be in [0, 1), got " +
                      std::to_string(s.dropout_p));
  }
}

namespace detail {

/// Blocks are spread over up to three stages with channel doubling at
/// each stage boundary; earlier stages absorb the remainder.
inline std::array<int, 3> stage_block_counts(int depth_units) {
  int n1 = (depth_units + 2) / 3;
  int rest = depth_units - n1;
  int n2 = (rest + 1) / 2;
  return {n1, n2, rest - n2};
}

struct BlockLayout {
  int index = 1;           // 1-based position, names the block
  int stage = 0;           // 0-based stage
  bool stage_start = false;  // first block of stage 2 or 3: downsample here
  int in_c = 0;
  int out_c = 0;
};

inline std::vector<BlockLayout> block_layouts(int depth_units,
                                              int width_base) {
  auto counts = stage_block_counts(depth_units);
  std::vector<BlockLayout> out;
  int in_c = width_base;
  int index = 1;
  for (int s = 0; s < 3; ++s) {
    for (int b = 0; b < counts[s]; ++b) {
      BlockLayout layout;
      layout.index = index++;
      layout.stage = s;
      layout.stage_start = b == 0 && s > 0;
      layout.in_c = in_c;
      layout.out_c = width_base << s;
      in_c = layout.out_c;
      out.push_back(layout);
    }
  }
  return out;
}

inline int populated_stages(int depth_units) {
  return depth_units < 3 ? depth_units : 3;
}

/// Channel budget of one inception block, split over its four branches.
struct InceptionSplit {
  int b1, b3, b5, bp;      // branch output channels
  int r3, r5;              // 1x1 reducer widths ahead of the 3x3 / 5x5
};

inline InceptionSplit inception_split(int out_c) {
  InceptionSplit sp;
  sp.b1 = std::max(1, out_c / 4);
  sp.b5 = std::max(1, out_c / 8);
  sp.bp = std::max(1, out_c / 8);
  sp.b3 = out_c - sp.b1 - sp.b5 - sp.bp;
  require(sp.b3 >= 1, "inception_split: output channels " +
                          std::to_string(out_c) + " too small to split");
  sp.r3 = std::max(1, sp.b3 / 2);
  sp.r5 = std::max(1, sp.b5 / 2);
  return sp;
}

}  // namespace detail

/// Width of the feature vector entering the classifier head.
inline int feature_dim(const ArchitectureSpec& s) {
  int top_width = s.width_base << (detail::populated_stages(s.depth_units) - 1);
  return s.family == Family::PlainAlexnetStyle ? 8 * s.width_base : top_width;
}

template <typename T>
struct ModelState {
  ArchitectureSpec spec;
  ParamStore<T> params;
  std::map<std::string, BatchNormState<T>> bn;
  std::vector<std::string> group_order;  // forward order: stem ... head
  std::string head_name = "head";

  Tensor<T>& p(const std::string& name) { return params.at(name).tensor; }
  const Tensor<T>& p(const std::string& name) const {
    return params.at(name).tensor;
  }
};

/// Layer group a parameter belongs to: the name segment before the first
/// dot ("block2.bn1.gamma" -> "block2").
inline std::string group_of(const std::string& param_name) {
  auto dot = param_name.find('.');
  return dot == std::string::npos ? param_name : param_name.substr(0, dot);
}

/// Group names in last-to-first order: the classifier head first, then
/// each shallower group, the stem last.
template <typename T>
std::vector<std::string> ordered_param_groups(const ModelState<T>& m) {
  return {m.group_order.rbegin(), m.group_order.rend()};
}

/// Marks exactly the first `k` groups of the last-to-first order as
/// trainable (k=1 trains the head only).
template <typename T>
void set_trainable_first_groups(ModelState<T>& m, int k) {
  std::vector<int> groups;
  for (int g = 0; g < k; ++g) groups.push_back(g);
  m.params.set_trainable_groups(groups);
}

// --- Block operations ----------------------------------------------------

template <typename T>
struct ResidualBlockParams {
  Tensor<T> conv1_w, bn1_gamma, bn1_beta;
  Tensor<T> conv2_w, bn2_gamma, bn2_beta;
  std::optional<Tensor<T>> proj_w;  // 1x1 shortcut projection
};

/// Two-conv residual unit: conv-bn-relu-conv-bn plus a shortcut, relu
/// after the sum. The shortcut is the identity unless the output shape
/// changes, in which case a 1x1 projection is required.
template <typename T>
Tensor<T> residual_block(const Tensor<T>& x, const ResidualBlockParams<T>& p,
                         BatchNormState<T>& bn1, BatchNormState<T>& bn2,
                         int stride, bool projection, Phase phase) {
  int in_c = x.dim(1);
  int out_c = p.conv1_w.dim(0);
  if (!projection && (stride != 1 || in_c != out_c)) {
    throw ShapeError(
        "residual_block: shortcut shape changes (stride " +
        std::to_string(stride) + ", channels " + std::to_string(in_c) +
        " -> " + std::to_string(out_c) + ") but no projection was given");
  }
  auto zero_bias = Tensor<T>::zeros({out_c});
  auto h = conv2d(x, p.conv1_w, zero_bias, stride, 1);
  h = batchnorm2d(h, p.bn1_gamma, p.bn1_beta, bn1, phase);
  h = relu(h);
  h = conv2d(h, p.conv2_w, zero_bias, 1, 1);
  h = batchnorm2d(h, p.bn2_gamma, p.bn2_beta, bn2, phase);
  Tensor<T> shortcut = x;
  if (projection) {
    if (!p.proj_w) {
      throw ShapeError("residual_block: projection requested but proj "
                       "weight is missing");
    }
    shortcut = conv2d(x, *p.proj_w, zero_bias, stride, 0);
  }
  return relu(add(h, shortcut));
}

enum class BranchKind { Conv1x1, Conv3x3Reduced, Conv5x5Reduced, PoolProj };

template <typename T>
struct InceptionBranch {
  BranchKind kind = BranchKind::Conv1x1;
  Tensor<T> w1, b1;  // the 1x1 conv (reducer or projection)
  Tensor<T> w2, b2;  // main conv of the reduced branches, else unused
};

/// Parallel-branch block: every branch runs at stride 1 with padding
/// chosen to preserve H and W, and outputs are concatenated on the
/// channel axis. Convs carry biases and relu; no batch norm here.
template <typename T>
Tensor<T> inception_block(const Tensor<T>& x,
                          const std::vector<InceptionBranch<T>>& branches) {
  if (branches.empty()) {
    throw ShapeError("inception_block: at least one branch is required");
  }
  std::vector<Tensor<T>> outs;
  for (const auto& br : branches) {
    switch (br.kind) {
      case BranchKind::Conv1x1:
        outs.push_back(relu(conv2d(x, br.w1, br.b1, 1, 0)));
        break;
      case BranchKind::Conv3x3Reduced: {
        auto r = relu(conv2d(x, br.w1, br.b1, 1, 0));
        outs.push_back(relu(conv2d(r, br.w2, br.b2, 1, 1)));
        break;
      }
      case BranchKind::Conv5x5Reduced: {
        auto r = relu(conv2d(x, br.w1, br.b1, 1, 0));
        outs.push_back(relu(conv2d(r, br.w2, br.b2, 1, 2)));
        break;
      }
      case BranchKind::PoolProj: {
        auto pooled = pool2d(x, PoolKind::Max, 3, 1, 1);
        outs.push_back(relu(conv2d(pooled, br.w1, br.b1, 1, 0)));
        break;
      }
    }
  }
  return concat_channels(outs);
}

// --- Construction --------------------------------------------------------

namespace detail {

template <typename T>
struct Builder {
  ModelState<T>& m;
  std::uint64_t seed;

  Tensor<T> init(const std::string& name, Shape shape, int fan_in) {
    Rng rng(sub_seed(seed, "init." + name));
    return he_normal_init<T>(std::move(shape), fan_in, rng);
  }
  void conv(const std::string& name, int oc, int ic, int k, bool bias) {
    m.params.add(name + ".weight", init(name + ".weight", {oc, ic, k, k},
                                        ic * k * k));
    if (bias) m.params.add(name + ".bias", Tensor<T>::zeros({oc}));
  }
  void bnorm(const std::string& prefix, int c) {
    m.params.add(prefix + ".gamma", Tensor<T>::full({c}, T(1)));
    m.params.add(prefix + ".beta", Tensor<T>::zeros({c}));
    m.bn.emplace(prefix, BatchNormState<T>(c));
  }
  void fc(const std::string& name, int out, int in) {
    m.params.add(name + ".weight", init(name + ".weight", {out, in}, in));
    m.params.add(name + ".bias", Tensor<T>::zeros({out}));
  }
};

[[noreturn]] inline void too_small(int input_side, const std::string& stage,
                                   int spatial) {
  throw ConfigError("build_architecture: input_side " +
                    std::to_string(input_side) +
                    " is too small for the downsampling schedule at stage '" +
                    stage + "' (spatial " + std::to_string(spatial) + "x" +
                    std::to_string(spatial) + ", needs >= 2)");
}

}  // namespace detail

/// Builds a freshly initialized model. Initialization draws one seeded
/// stream per parameter name, so the result is bit-identical for equal
/// (spec, seed) regardless of construction order changes elsewhere.
template <typename T = float>
ModelState<T> build_architecture(const ArchitectureSpec& spec,
                                 std::uint64_t seed) {
  validate_architecture(spec);
  ModelState<T> m;
  m.spec = spec;
  detail::Builder<T> b{m, seed};

  int wb = spec.width_base;
  int side = spec.input_side;
  int h = side;
  auto layouts = detail::block_layouts(spec.depth_units, wb);
  m.group_order.push_back("stem");

  switch (spec.family) {
    case Family::PlainAlexnetStyle: {
      b.conv("stem.conv", wb, spec.input_channels, 5, true);
      h = (h + 2 * 2 - 5) / 2 + 1;
      if (h < 2) detail::too_small(side, "stem.pool", h);
      h = (h - 2) / 2 + 1;
      for (const auto& L : layouts) {
        std::string g = "block" + std::to_string(L.index);
        m.group_order.push_back(g);
        b.conv(g + ".conv", L.out_c, L.in_c, 3, true);
        if (L.stage_start) h = (h + 2 * 1 - 3) / 2 + 1;
      }
      int flat = layouts.back().out_c * h * h;
      m.group_order.push_back("fc1");
      b.fc("fc1", 8 * wb, flat);
      break;
    }
    case Family::SmallFilterVggStyle: {
      b.conv("stem.conv", wb, spec.input_channels, 3, true);
      for (const auto& L : layouts) {
        std::string g = "block" + std::to_string(L.index);
        m.group_order.push_back(g);
        if (L.stage_start) {
          if (h < 2) detail::too_small(side, g + ".pool", h);
          h = (h - 2) / 2 + 1;
        }
        b.conv(g + ".conv", L.out_c, L.in_c, 3, true);
      }
      break;
    }
    case Family::InceptionStyle: {
      b.conv("stem.conv", wb, spec.input_channels, 3, true);
      if (h < 2) detail::too_small(side, "stem.pool", h);
      h = (h - 2) / 2 + 1;
      for (const auto& L : layouts) {
        std::string g = "block" + std::to_string(L.index);
        m.group_order.push_back(g);
        if (L.stage_start) {
          if (h < 2) detail::too_small(side, g + ".pool", h);
          h = (h - 2) / 2 + 1;
        }
        auto sp = detail::inception_split(L.out_c);
        b.conv(g + ".b1", sp.b1, L.in_c, 1, true);
        b.conv(g + ".b3r", sp.r3, L.in_c, 1, true);
        b.conv(g + ".b3", sp.b3, sp.r3, 3, true);
        b.conv(g + ".b5r", sp.r5, L.in_c, 1, true);
        b.conv(g + ".b5", sp.b5, sp.r5, 5, true);
        b.conv(g + ".proj", sp.bp, L.in_c, 1, true);
      }
      break;
    }
    case Family::ResidualStyle: {
      b.conv("stem.conv", wb, spec.input_channels, 3, false);
      b.bnorm("stem.bn", wb);
      for (const auto& L : layouts) {
        std::string g = "block" + std::to_string(L.index);
        m.group_order.push_back(g);
        b.conv(g + ".conv1", L.out_c, L.in_c, 3, false);
        b.bnorm(g + ".bn1", L.out_c);
        b.conv(g + ".conv2", L.out_c, L.out_c, 3, false);
        b.bnorm(g + ".bn2", L.out_c);
        if (L.stage_start) {
          m.params.add(g + ".proj.weight",
                       b.init(g + ".proj.weight", {L.out_c, L.in_c, 1, 1},
                              L.in_c));
          h = (h + 2 * 1 - 3) / 2 + 1;
        }
      }
      break;
    }
  }

  m.group_order.push_back("head");
  b.fc("head", spec.num_classes, feature_dim(spec));

  // Last-to-first group indices: head 0, deepest block 1, ..., stem last.
  std::map<std::string, int> rank;
  int n = static_cast<int>(m.group_order.size());
  for (int i = 0; i < n; ++i) rank[m.group_order[i]] = n - 1 - i;
  for (auto& p : m.params.items()) p.group_index = rank.at(group_of(p.name));
  return m;
}

// --- Forward -------------------------------------------------------------

namespace detail {

/// Runs the forward pass group by group. When `stop_group` is non-empty
/// the activation entering that group is returned instead of logits and
/// `*stopped` is set.
template <typename T>
Tensor<T> forward_until(ModelState<T>& m, const Tensor<T>& input, Phase phase,
                        Rng* rng, const std::string& stop_group,
                        bool* stopped) {
  const auto& s = m.spec;
  if (stopped) *stopped = false;
  if (input.rank() != 4 || input.dim(1) != s.input_channels ||
      input.dim(2) != s.input_side || input.dim(3) != s.input_side) {
    throw ShapeError("forward: expected batch of shape Nx" +
                     std::to_string(s.input_channels) + "x" +
                     std::to_string(s.input_side) + "x" +
                     std::to_string(s.input_side) + ", got " +
                     shape_str(input.shape()));
  }
  auto stop_at = [&](const std::string& g) {
    if (stop_group != g) return false;
    if (stopped) *stopped = true;
    return true;
  };

  Tensor<T> h = input;
  if (stop_at("stem")) return h;
  switch (s.family) {
    case Family::PlainAlexnetStyle:
      h = relu(conv2d(h, m.p("stem.conv.weight"), m.p("stem.conv.bias"), 2,
                      2));
      h = pool2d(h, PoolKind::Max, 2, 2);
      break;
    case Family::SmallFilterVggStyle:
      h = relu(conv2d(h, m.p("stem.conv.weight"), m.p("stem.conv.bias"), 1,
                      1));
      break;
    case Family::InceptionStyle:
      h = relu(conv2d(h, m.p("stem.conv.weight"), m.p("stem.conv.bias"), 1,
                      1));
      h = pool2d(h, PoolKind::Max, 2, 2);
      break;
    case Family::ResidualStyle:
      h = conv2d(h, m.p("stem.conv.weight"),
                 Tensor<T>::zeros({s.width_base}), 1, 1);
      h = batchnorm2d(h, m.p("stem.bn.gamma"), m.p("stem.bn.beta"),
                      m.bn.at("stem.bn"), phase);
      h = relu(h);
      break;
  }

  for (const auto& L : block_layouts(s.depth_units, s.width_base)) {
    std::string g = "block" + std::to_string(L.index);
    if (stop_at(g)) return h;
    switch (s.family) {
      case Family::PlainAlexnetStyle:
        h = relu(conv2d(h, m.p(g + ".conv.weight"), m.p(g + ".conv.bias"),
                        L.stage_start ? 2 : 1, 1));
        break;
      case Family::SmallFilterVggStyle:
        if (L.stage_start) h = pool2d(h, PoolKind::Max, 2, 2);
        h = relu(conv2d(h, m.p(g + ".conv.weight"), m.p(g + ".conv.bias"), 1,
                        1));
        break;
      case Family::InceptionStyle: {
        if (L.stage_start) h = pool2d(h, PoolKind::Max, 2, 2);
        std::vector<InceptionBranch<T>> branches;
        branches.push_back({BranchKind::Conv1x1, m.p(g + ".b1.weight"),
                            m.p(g + ".b1.bias"), {}, {}});
        branches.push_back({BranchKind::Conv3x3Reduced, m.p(g + ".b3r.weight"),
                            m.p(g + ".b3r.bias"), m.p(g + ".b3.weight"),
                            m.p(g + ".b3.bias")});
        branches.push_back({BranchKind::Conv5x5Reduced, m.p(g + ".b5r.weight"),
                            m.p(g + ".b5r.bias"), m.p(g + ".b5.weight"),
                            m.p(g + ".b5.bias")});
        branches.push_back({BranchKind::PoolProj, m.p(g + ".proj.weight"),
                            m.p(g + ".proj.bias"), {}, {}});
        h = inception_block(h, branches);
        break;
      }
      case Family::ResidualStyle: {
        ResidualBlockParams<T> bp;
        bp.conv1_w = m.p(g + ".conv1.weight");
        bp.bn1_gamma = m.p(g + ".bn1.gamma");
        bp.bn1_beta = m.p(g + ".bn1.beta");
        bp.conv2_w = m.p(g + ".conv2.weight");
        bp.bn2_gamma = m.p(g + ".bn2.gamma");
        bp.bn2_beta = m.p(g + ".bn2.beta");
        if (L.stage_start) bp.proj_w = m.p(g + ".proj.weight");
        h = residual_block(h, bp, m.bn.at(g + ".bn1"), m.bn.at(g + ".bn2"),
                           L.stage_start ? 2 : 1, L.stage_start, phase);
        break;
      }
    }
  }

  if (s.family == Family::PlainAlexnetStyle) {
    if (stop_at("fc1")) return h;
    h = relu(affine(flatten(h), m.p("fc1.weight"), m.p("fc1.bias")));
  } else {
    h = pool2d(h, PoolKind::GlobalAvg);
  }
  if (stop_at("head")) return h;
  auto feats = flatten(h);
  if (s.dropout_p > 0.0 && phase == Phase::Train) {
    if (!rng) {
      throw ConfigError("forward: dropout_p > 0 in train phase requires a "
                        "random stream");
    }
    feats = dropout(feats, s.dropout_p, phase, *rng);
  }
  return affine(feats, m.p("head.weight"), m.p("head.bias"));
}

}  // namespace detail

/// Full forward pass to logits (N x num_classes). `rng` feeds dropout and
/// is only required in train phase with dropout_p > 0.
template <typename T>
Tensor<T> forward(ModelState<T>& m, const Tensor<T>& input, Phase phase,
                  Rng* rng = nullptr) {
  return detail::forward_until(m, input, phase, rng, "", nullptr);
}

/// Eval-mode forward truncated at the named group: returns the activation
/// entering that group, flattened to N x D. The model is left untouched.
/// The default tap, "head", yields the classifier's input features.
template <typename T>
Tensor<T> extract_features(ModelState<T>& m, const std::string& group,
                           const Tensor<T>& batch) {
  bool known = false;
  for (const auto& g : m.group_order) known = known || g == group;
  if (!known) {
    std::string valid;
    for (const auto& g : m.group_order) {
      if (!valid.empty()) valid += ", ";
      valid += g;
    }
    throw ConfigError("extract_features: unknown layer group '" + group +
                      "' (valid: " + valid + ")");
  }
  NoGradGuard guard;
  bool stopped = false;
  auto h = detail::forward_until(m, batch, Phase::Eval, nullptr, group,
                                 &stopped);
  return flatten(h);
}

/// Deep copy: fresh tensors, preserved names, flags, and running stats.
template <typename T>
ModelState<T> clone_model(const ModelState<T>& m) {
  ModelState<T> out;
  out.spec = m.spec;
  out.group_order = m.group_order;
  out.head_name = m.head_name;
  out.bn = m.bn;
  for (const auto& p : m.params.items()) {
    auto& np = out.params.add(p.name, p.tensor.clone_detached(),
                              p.group_index);
    np.trainable = p.trainable;
  }
  return out;
}

/// Head surgery for transfer: every non-head parameter is copied
/// bit-for-bit, the head is re-initialized at the new class count and
/// marked trainable.
template <typename T>
ModelState<T> replace_classifier_head(const ModelState<T>& m,
                                      int new_num_classes,
                                      std::uint64_t seed) {
  if (new_num_classes < 2) {
    throw ConfigError("replace_classifier_head: num_classes must be >= 2, "
                      "got " + std::to_string(new_num_classes));
  }
  ModelState<T> out = clone_model(m);
  out.spec.num_classes = new_num_classes;
  int feat = feature_dim(out.spec);
  Rng rng(sub_seed(seed, "init.head.weight"));
  auto& w = out.params.at("head.weight");
  w.tensor = he_normal_init<T>({new_num_classes, feat}, feat, rng);
  w.tensor.set_requires_grad(true);
  w.trainable = true;
  auto& b = out.params.at("head.bias");
  b.tensor = Tensor<T>::zeros({new_num_classes});
  b.tensor.set_requires_grad(true);
  b.trainable = true;
  return out;
}

}  // namespace serval::nn
