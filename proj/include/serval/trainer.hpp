// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "serval/batch.hpp"
#include "serval/common.hpp"
#include "serval/manifest.hpp"
#include "serval/nets.hpp"
#include "serval/ops.hpp"
#include "serval/optim.hpp"
#include "serval/rng.hpp"
#include "serval/tensor.hpp"

namespace serval::nn {

/// Hyperparameters shared by pretraining, feature extraction and
/// fine-tuning. `pretrained_lr_scale` multiplies the learning rate of
/// every non-head group during fine-tuning so transferred weights move
/// slower than the fresh head.
struct TrainConfig {
  double base_lr = 0.01;
  double pretrained_lr_scale = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int step_size = 10;      // epochs per learning-rate decay step
  double gamma = 0.1;      // decay factor per step
  int epochs_per_round = 5;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

inline void validate_train_config(const TrainConfig& c) {
  if (!(c.base_lr >= 0)) {
    throw ConfigError("train config: base_lr must be >= 0");
  }
  if (!(c.pretrained_lr_scale >= 0)) {
    throw ConfigError("train config: pretrained_lr_scale must be >= 0");
  }
  if (!(c.momentum >= 0)) {
    throw ConfigError("train config: momentum must be >= 0");
  }
  if (!(c.weight_decay >= 0)) {
    throw ConfigError("train config: weight_decay must be >= 0");
  }
  if (c.step_size < 1) {
    throw ConfigError("train config: step_size must be >= 1");
  }
  if (!(c.gamma > 0 && c.gamma <= 1)) {
    throw ConfigError("train config: gamma must be in (0, 1]");
  }
  if (c.epochs_per_round < 1) {
    throw ConfigError("train config: epochs_per_round must be >= 1");
  }
  if (c.batch_size < 1) {
    throw ConfigError("train config: batch_size must be >= 1");
  }
}

/// Step-decay schedule: base_lr * gamma^floor(epoch / step_size).
inline double lr_at(const TrainConfig& c, int epoch) {
  if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
  return c.base_lr * std::pow(c.gamma, epoch / c.step_size);
}

/// One history row per epoch. `eval_top1` is NaN when the manifest has
/// no eval split.
struct EpochStats {
  int epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  double eval_top1 = std::numeric_limits<double>::quiet_NaN();
};

inline std::string history_to_text(const std::vector<EpochStats>& rows) {
  std::string out;
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "epoch=%d lr=%.8g loss=%.8g top1=%.8g\n",
                  r.epoch, r.lr, r.mean_loss, r.eval_top1);
    out += buf;
  }
  return out;
}

namespace detail {

inline bool split_has_records(const data::Manifest& m, data::Split s) {
  for (const auto& [id, split] : m.splits) {
    (void)id;
    if (split == s) return true;
  }
  return false;
}

template <typename T>
std::vector<std::string> model_groups(const ModelState<T>& m) {
  std::vector<std::string> out;
  for (const auto& p : m.params.items()) {
    auto g = group_of(p.name);
    bool seen = false;
    for (const auto& o : out) seen = seen || o == g;
    if (!seen) out.push_back(g);
  }
  return out;
}

}  // namespace detail

/// Top-1 accuracy of eval-phase forwards over one split. Ties between
/// equal logits resolve to the lowest class index.
template <typename T>
double eval_top1(ModelState<T>& model, const data::Manifest& manifest,
                 data::Split split, int batch_size) {
  NoGradGuard guard;
  data::BatchIterator it(manifest, split, batch_size, model.spec.input_side,
                         0, 0, /*shuffle=*/false);
  std::size_t correct = 0, total = 0;
  while (auto batch = it.next()) {
    auto logits = forward(model, batch->images, Phase::Eval);
    auto rows = logits.data();
    int c = logits.dim(1);
    for (int i = 0; i < logits.dim(0); ++i) {
      int arg = 0;
      for (int j = 1; j < c; ++j) {
        if (rows[i * c + j] > rows[i * c + arg]) arg = j;
      }
      correct += arg == batch->labels[static_cast<std::size_t>(i)];
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

/// Minibatch SGD over the manifest's train split for
/// `epochs_per_round` epochs. Only the named layer groups are updated;
/// everything else is frozen for the duration of the call. With
/// `scale_pretrained`, non-head groups train at
/// base_lr * pretrained_lr_scale. `epoch_base` offsets the shuffle
/// stream so successive rounds see different batch orders; the decay
/// schedule always restarts at the local epoch.
template <typename T>
std::vector<EpochStats> train(ModelState<T>& model,
                              const data::Manifest& manifest,
                              const TrainConfig& cfg,
                              const std::vector<std::string>& trainable_groups,
                              bool scale_pretrained = false,
                              int epoch_base = 0) {
  validate_train_config(cfg);
  if (trainable_groups.empty()) {
    throw ConfigError("train: no trainable groups given");
  }
  auto known = detail::model_groups(model);
  for (const auto& g : trainable_groups) {
    bool ok = false;
    for (const auto& k : known) ok = ok || k == g;
    if (!ok) throw ConfigError("train: unknown layer group '" + g + "'");
  }
  for (auto& p : model.params.items()) {
    auto g = group_of(p.name);
    p.trainable = false;
    for (const auto& t : trainable_groups) {
      if (g == t) p.trainable = true;
    }
  }

  std::function<T(const Parameter<T>&)> lr_scale;
  if (scale_pretrained) {
    lr_scale = [&cfg](const Parameter<T>& p) {
      return p.group_index == 0 ? T(1)
                                : static_cast<T>(cfg.pretrained_lr_scale);
    };
  }

  Sgd<T> opt(static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));
  bool has_eval = detail::split_has_records(manifest, data::Split::Eval);
  std::vector<EpochStats> history;
  for (int e = 0; e < cfg.epochs_per_round; ++e) {
    double lr = lr_at(cfg, e);
    data::BatchIterator it(manifest, data::Split::Train, cfg.batch_size,
                           model.spec.input_side, cfg.seed,
                           static_cast<std::uint64_t>(epoch_base + e));
    Rng dropout_rng(
        sub_seed(cfg.seed, "dropout", static_cast<std::uint64_t>(epoch_base + e)));
    double loss_sum = 0;
    std::size_t seen = 0;
    while (auto batch = it.next()) {
      model.params.zero_grad();
      auto logits = forward(model, batch->images, Phase::Train, &dropout_rng);
      auto loss = softmax_cross_entropy(
          logits, std::span<const int>(batch->labels));
      loss.backward();
      opt.step(model.params, static_cast<T>(lr), lr_scale);
      loss_sum += static_cast<double>(loss.item()) * batch->labels.size();
      seen += batch->labels.size();
    }
    EpochStats row;
    row.epoch = e;
    row.lr = lr;
    row.mean_loss = loss_sum / static_cast<double>(seen);
    if (has_eval) {
      row.eval_top1 = eval_top1(model, manifest, data::Split::Eval,
                                cfg.batch_size);
    }
    history.push_back(row);
  }
  return history;
}

/// Black-box transfer: fits the classifier head on frozen features.
/// The body is only ever run in eval phase, so no parameter, velocity
/// or running statistic outside the head can change. Requires the
/// caller to have frozen every non-head group beforehand.
template <typename T>
std::vector<EpochStats> feature_extraction_fit(ModelState<T>& model,
                                               const data::Manifest& manifest,
                                               const TrainConfig& cfg) {
  validate_train_config(cfg);
  for (auto& p : model.params.items()) {
    if (p.trainable && group_of(p.name) != model.head_name) {
      throw ConfigError("feature_extraction_fit: non-head group '" +
                        group_of(p.name) + "' is marked trainable");
    }
    if (group_of(p.name) == model.head_name) p.trainable = true;
  }

  Tensor<T>& weight = model.p(model.head_name + ".weight");
  Tensor<T>& bias = model.p(model.head_name + ".bias");
  Sgd<T> opt(static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));
  bool has_eval = detail::split_has_records(manifest, data::Split::Eval);
  std::vector<EpochStats> history;
  for (int e = 0; e < cfg.epochs_per_round; ++e) {
    double lr = lr_at(cfg, e);
    data::BatchIterator it(manifest, data::Split::Train, cfg.batch_size,
                           model.spec.input_side, cfg.seed,
                           static_cast<std::uint64_t>(e));
    double loss_sum = 0;
    std::size_t seen = 0;
    while (auto batch = it.next()) {
      auto feats = extract_features(model, model.head_name, batch->images);
      model.params.zero_grad();
      auto logits = affine(feats, weight, bias);
      auto loss = softmax_cross_entropy(
          logits, std::span<const int>(batch->labels));
      loss.backward();
      opt.step(model.params, static_cast<T>(lr));
      loss_sum += static_cast<double>(loss.item()) * batch->labels.size();
      seen += batch->labels.size();
    }
    EpochStats row;
    row.epoch = e;
    row.lr = lr;
    row.mean_loss = loss_sum / static_cast<double>(seen);
    if (has_eval) {
      row.eval_top1 = eval_top1(model, manifest, data::Split::Eval,
                                cfg.batch_size);
    }
    history.push_back(row);
  }
  return history;
}

/// Outcome of a progressive last-to-first fine-tune run.
struct FineTuneState {
  int round = -1;                         // last completed round
  std::vector<std::string> unfrozen_groups;  // groups open in that round
  std::vector<double> history;            // per-round eval top-1
  int best_round = -1;
  double best_metric = -std::numeric_limits<double>::infinity();
  std::string stop_reason;  // "improvement-exhausted" | "groups-exhausted"
};

/// Drives the unfreeze schedule: round r opens the first r+1 groups in
/// last-to-first order, `run_round` trains and returns the round's eval
/// metric, `on_best` fires after each strict improvement beyond
/// min_delta. Stops after `patience` consecutive non-improving rounds
/// or when every group is open.
inline FineTuneState run_unfreeze_schedule(
    const std::vector<std::string>& groups, int patience, double min_delta,
    const std::function<double(int, const std::vector<std::string>&)>&
        run_round,
    const std::function<void(int)>& on_best = {}) {
  if (patience < 1) {
    throw ConfigError("finetune: patience must be >= 1");
  }
  if (!(min_delta >= 0)) {
    throw ConfigError("finetune: min_delta must be >= 0");
  }
  if (groups.empty()) {
    throw ConfigError("finetune: model has no layer groups");
  }
  FineTuneState st;
  int stall = 0;
  for (int r = 0; r < static_cast<int>(groups.size()); ++r) {
    std::vector<std::string> unfrozen(groups.begin(),
                                      groups.begin() + r + 1);
    double metric = run_round(r, unfrozen);
    st.round = r;
    st.unfrozen_groups = std::move(unfrozen);
    st.history.push_back(metric);
    if (metric > st.best_metric + min_delta) {
      st.best_metric = metric;
      st.best_round = r;
      stall = 0;
      if (on_best) on_best(r);
    } else if (++stall >= patience) {
      st.stop_reason = "improvement-exhausted";
      return st;
    }
  }
  st.stop_reason = "groups-exhausted";
  return st;
}

/// Progressive fine-tuning: round 0 trains the head alone, each later
/// round also opens the next group toward the input, head at base_lr
/// and transferred groups at base_lr * pretrained_lr_scale. Returns the
/// model snapshot from the best round along with the schedule record.
template <typename T>
std::pair<ModelState<T>, FineTuneState> progressive_finetune(
    ModelState<T>& model, const data::Manifest& manifest,
    const TrainConfig& cfg, int patience = 1, double min_delta = 0.0) {
  validate_train_config(cfg);
  if (!detail::split_has_records(manifest, data::Split::Eval)) {
    throw DataError("finetune: manifest has no eval split to select the "
                    "best round on");
  }
  auto groups = ordered_param_groups(model);
  ModelState<T> best = clone_model(model);
  auto runner = [&](int r, const std::vector<std::string>& unfrozen) {
    auto hist = train(model, manifest, cfg, unfrozen,
                      /*scale_pretrained=*/true,
                      /*epoch_base=*/r * cfg.epochs_per_round);
    return hist.back().eval_top1;
  };
  auto snapshot = [&](int) { best = clone_model(model); };
  FineTuneState st =
      run_unfreeze_schedule(groups, patience, min_delta, runner, snapshot);
  return {std::move(best), st};
}

}  // namespace serval::nn
