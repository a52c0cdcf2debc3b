// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "serval/common.hpp"
#include "serval/nets.hpp"
#include "serval/ops.hpp"
#include "serval/rng.hpp"
#include "serval/tensor.hpp"

namespace serval::nn::gradcheck {

inline constexpr double kEps = 1e-5;
inline constexpr double kTolerance = 1e-4;

/// Maximum guarded relative error between the analytic gradient of the
/// scalar loss `f` and central finite differences, over every element of
/// every tensor in `leaves`. The denominator is floored at 1e-3 so that
/// near-zero gradient pairs compare absolutely instead of amplifying
/// roundoff. Elements whose first measurement disagrees are re-measured
/// with a 100x narrower window: a relu or max kink that happened to sit
/// inside the window drops out, a wrong analytic gradient stays. `f`
/// must rebuild its graph on every call and depend on the leaves'
/// current values only.
template <typename LossFn>
double max_rel_error(LossFn&& f, std::span<Tensor<double>> leaves,
                     double eps = kEps, double analytic_bias = 0.0) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  {
    auto loss = f();
    loss.backward();
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) {
    auto g = leaf.grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  if (analytic_bias != 0.0 && !analytic.empty() && !analytic[0].empty()) {
    // Test hook: simulates a corrupted backward pass.
    for (auto& v : analytic[0]) v += analytic_bias;
  }

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto x = leaves[li].data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      double saved = x[i];
      double lo, hi;
      {
        NoGradGuard guard;
        x[i] = saved + eps;
        hi = f().item();
        x[i] = saved - eps;
        lo = f().item();
        x[i] = saved;
      }
      double numeric = (hi - lo) / (2.0 * eps);
      double a = analytic[li][i];
      double rel = std::abs(a - numeric) /
                   std::max({1e-3, std::abs(a), std::abs(numeric)});
      if (rel > 0.5 * kTolerance) {
        double fine = eps / 100.0;
        NoGradGuard guard;
        x[i] = saved + fine;
        double hi2 = f().item();
        x[i] = saved - fine;
        double lo2 = f().item();
        x[i] = saved;
        double numeric2 = (hi2 - lo2) / (2.0 * fine);
        double rel2 = std::abs(a - numeric2) /
                      std::max({1e-3, std::abs(a), std::abs(numeric2)});
        rel = std::min(rel, rel2);
      }
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

/// Shuffled linspace over [-1, 1] excluding values near zero; keeps
/// relu/max-pool kinks well away from the finite-difference window.
inline std::vector<double> spread_values(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    double t = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    v[i] = 2.0 * t - 1.0;
    if (std::abs(v[i]) < 1e-3) v[i] = v[i] < 0 ? -1e-3 : 1e-3;
  }
  rng.shuffle(v);
  return v;
}

inline Tensor<double> spread_tensor(Shape shape, Rng& rng) {
  std::size_t n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor<double>::from(spread_values(n, rng), std::move(shape));
}

inline Tensor<double> normal_tensor(Shape shape, Rng& rng,
                                    double stddev = 1.0) {
  auto t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

struct OpCheck {
  std::string name;
  double max_rel_err = 0.0;
};

struct SuiteResult {
  std::vector<OpCheck> checks;

  const OpCheck& worst() const {
    std::size_t wi = 0;
    for (std::size_t i = 1; i < checks.size(); ++i) {
      if (checks[i].max_rel_err > checks[wi].max_rel_err) wi = i;
    }
    return checks[wi];
  }

  bool pass(double tol = kTolerance) const {
    for (const auto& c : checks) {
      if (!(c.max_rel_err <= tol)) return false;
    }
    return true;
  }
};

/// Finite-difference scenarios for every differentiable primitive.
/// `corrupt_op`, when non-empty, biases the analytic gradient of that one
/// scenario so the harness's failure path can be exercised.
inline SuiteResult run_op_suite(std::uint64_t seed,
                                const std::string& corrupt_op = "") {
  SuiteResult result;
  auto bias_for = [&](const std::string& name) {
    return name == corrupt_op ? 0.05 : 0.0;
  };
  auto run = [&](const std::string& name, auto f,
                 std::vector<Tensor<double>> leaves) {
    double err =
        max_rel_error(f, std::span<Tensor<double>>(leaves), kEps,
                      bias_for(name));
    result.checks.push_back({name, err});
  };

  {
    Rng rng(sub_seed(seed, "gradcheck.conv2d"));
    auto x = normal_tensor({2, 3, 8, 8}, rng);
    auto w = normal_tensor({4, 3, 3, 3}, rng, 0.5);
    auto b = normal_tensor({4}, rng, 0.5);
    run("conv2d", [=] { return sum_all(conv2d(x, w, b, 2, 1)); }, {x, w, b});
  }
  {
    Rng rng(sub_seed(seed, "gradcheck.pool-max"));
    auto x = spread_tensor({2, 2, 6, 6}, rng);
    run("pool2d/max", [=] { return sum_all(pool2d(x, PoolKind::Max, 2, 2)); },
        {x});
  }
  {
    Rng rng(sub_seed(seed, "gradcheck.pool-max-padded"));
    auto x = spread_tensor({2, 2, 5, 5}, rng);
    run("pool2d/max-padded",
        [=] { return sum_all(pool2d(x, PoolKind::Max, 3, 1, 1)); }, {x});
  }
  {
    Rng rng(sub_seed(seed, "gradcheck.pool-avg"));
    auto x = normal_tensor({2, 2, 6, 6}, rng);
    run("pool2d/avg", [=] { return sum_all(pool2d(x, PoolKind::Avg, 3, 2)); },
        {x});
  }
  {
    Rng rng(sub_seed(seed, "gradcheck.pool-gap"));
    auto x = normal_tensor({2, 3, 5, 5}, rng);
    run("pool2d/global-avg",
        [=] { return sum_all(pool2d(x, PoolKind::GlobalAvg)); }, {x});
  }
  {
    Rng rng(sub_seed(seed, "gradcheck.affine"));
    auto x = normal_tensor({3, 5}, rng);
    auto w = normal_tensor({4, 5}, rng, 0.5);
    auto b = normal_tensor({4}, rng, 0.5);
    run("affine", [=] { return sum_all(affine(x, w, b)); }, {x, w, b});
  }
  {
    Rng rng(sub_seed(seed, "gradcheck.relu"));
    auto x = spread_tensor({4, 16}, rng);
    // Weight the sum so elementwise masking errors cannot cancel.
    auto w = normal_tensor({16, 16}, rng, 0.3);
    auto b = normal_tensor({16}, rng, 0.1);
    run("relu", [=] { return sum_all(affine(relu(x), w, b)); }, {x});
  }
  {
    Rng rng(sub_seed(seed, "gradcheck.batchnorm"));
    auto x = normal_tensor({3, 4, 5, 5}, rng);
    auto gamma = normal_tensor({4}, rng, 0.5);
    auto beta = normal_tensor({4}, rng, 0.5);
    auto w = normal_tensor({1, 100}, rng, 0.3);
    run("batchnorm2d",
        [=] {
          BatchNormState<double> state(4);
          auto y = batchnorm2d(x, gamma, beta, state, Phase::Train);
          // Project through fixed weights: plain sums are blind to
          // normalization errors (output means are constrained).
          return sum_all(affine(flatten(y), w, Tensor<double>::zeros({1})));
        },
        {x, gamma, beta});
  }
  {
    Rng rng(sub_seed(seed, "gradcheck.dropout"));
    auto x = normal_tensor({4, 25}, rng);
    std::uint64_t mask_seed = sub_seed(seed, "gradcheck.dropout-mask");
    run("dropout",
        [=] {
          Rng stream(mask_seed);  // same mask on every forward
          return sum_all(dropout(x, 0.4, Phase::Train, stream));
        },
        {x});
  }
  {
    Rng rng(sub_seed(seed, "gradcheck.softmax-ce"));
    auto logits = normal_tensor({4, 26}, rng);
    std::vector<int> labels;
    for (int i = 0; i < 4; ++i) {
      labels.push_back(static_cast<int>(rng.uniform_index(26)));
    }
    run("softmax_cross_entropy",
        [=] { return softmax_cross_entropy(logits, labels); }, {logits});
  }

  return result;
}

/// Full-model finite-difference check: every parameter of a micro-scale
/// instance of `family`, plus the input batch, against the analytic
/// gradients of the cross-entropy loss. Parameters are jittered away
/// from their initial values first: zero-initialized biases would park
/// entire relu channels exactly on the kink, where central differences
/// and the subgradient legitimately disagree.
inline OpCheck check_model_family(Family family, std::uint64_t seed,
                                  double analytic_bias = 0.0) {
  ArchitectureSpec spec;
  spec.family = family;
  spec.depth_units = 2;
  spec.input_side = family == Family::PlainAlexnetStyle ? 10 : 8;
  spec.input_channels = 3;
  spec.num_classes = 3;
  spec.dropout_p = 0.0;
  spec.width_base = 4;

  auto model = build_architecture<double>(spec, sub_seed(seed, "model"));
  Rng jitter(sub_seed(seed, "model-jitter"));
  for (auto& p : model.params.items()) {
    for (auto& v : p.tensor.data()) v += jitter.normal(0.0, 0.2);
  }
  Rng rng(sub_seed(seed, "model-input"));
  auto x = normal_tensor({2, 3, spec.input_side, spec.input_side}, rng, 0.7);
  std::vector<int> labels{0, 2};

  std::vector<Tensor<double>> leaves{x};
  for (auto& p : model.params.items()) leaves.push_back(p.tensor);
  double err = max_rel_error(
      [&] {
        auto logits = forward(model, x, Phase::Train);
        return softmax_cross_entropy(logits, labels);
      },
      std::span<Tensor<double>>(leaves), kEps, analytic_bias);
  return {"model/" + family_to_string(family), err};
}

/// One micro model per architecture family through the full-model check.
inline SuiteResult run_model_suite(std::uint64_t seed,
                                   const std::string& corrupt_op = "") {
  SuiteResult result;
  for (Family family :
       {Family::PlainAlexnetStyle, Family::SmallFilterVggStyle,
        Family::InceptionStyle, Family::ResidualStyle}) {
    double bias =
        "model/" + family_to_string(family) == corrupt_op ? 0.05 : 0.0;
    result.checks.push_back(check_model_family(family, seed, bias));
  }
  return result;
}

/// Ops plus model families, the whole differentiation self-test.
inline SuiteResult run_full_suite(std::uint64_t seed,
                                  const std::string& corrupt_op = "") {
  auto result = run_op_suite(seed, corrupt_op);
  auto models = run_model_suite(seed, corrupt_op);
  result.checks.insert(result.checks.end(), models.checks.begin(),
                       models.checks.end());
  return result;
}

}  // namespace serval::nn::gradcheck
