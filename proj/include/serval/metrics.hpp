// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "serval/batch.hpp"
#include "serval/common.hpp"
#include "serval/manifest.hpp"
#include "serval/nets.hpp"
#include "serval/tensor.hpp"

namespace serval::eval {

/// Scored predictions for one evaluation pass. Ranks sort by descending
/// logit with ties going to the lower class index, which makes every
/// metric order-independent and deterministic.
struct PredictionSet {
  nn::Tensor<float> logits;  // N x C
  std::vector<int> labels;
  std::vector<std::string> class_table;
};

inline void validate_predictions(const PredictionSet& p) {
  if (p.logits.rank() != 2 || p.logits.dim(0) < 1) {
    throw ConfigError("predictions: logits must be N x C with N >= 1");
  }
  int n = p.logits.dim(0), c = p.logits.dim(1);
  if (static_cast<int>(p.class_table.size()) != c) {
    throw ConfigError("predictions: class table has " +
                      std::to_string(p.class_table.size()) +
                      " names for " + std::to_string(c) + " classes");
  }
  if (static_cast<int>(p.labels.size()) != n) {
    throw ConfigError("predictions: " + std::to_string(p.labels.size()) +
                      " labels for " + std::to_string(n) + " samples");
  }
  for (int y : p.labels) {
    if (y < 0 || y >= c) {
      throw ConfigError("predictions: label " + std::to_string(y) +
                        " out of range [0, " + std::to_string(c) + ")");
    }
  }
}

namespace detail {

/// 1-based rank of the true class: one more than the number of classes
/// placed ahead of it (higher logit, or equal logit and lower index).
inline int true_rank(std::span<const float> row, int c, int label) {
  int ahead = 0;
  for (int j = 0; j < c; ++j) {
    if (j == label) continue;
    if (row[static_cast<std::size_t>(j)] >
            row[static_cast<std::size_t>(label)] ||
        (row[static_cast<std::size_t>(j)] ==
             row[static_cast<std::size_t>(label)] &&
         j < label)) {
      ++ahead;
    }
  }
  return ahead + 1;
}

inline int argmax_class(std::span<const float> row, int c) {
  int arg = 0;
  for (int j = 1; j < c; ++j) {
    if (row[static_cast<std::size_t>(j)] >
        row[static_cast<std::size_t>(arg)]) {
      arg = j;
    }
  }
  return arg;
}

}  // namespace detail

/// Fraction of samples whose true class sits among the k top-ranked.
inline double topk_accuracy(const PredictionSet& preds, int k) {
  validate_predictions(preds);
  int n = preds.logits.dim(0), c = preds.logits.dim(1);
  if (k < 1 || k > c) {
    throw ConfigError("topk_accuracy: k must be in [1, " +
                      std::to_string(c) + "], got " + std::to_string(k));
  }
  auto data = preds.logits.data();
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    auto row = data.subspan(static_cast<std::size_t>(i) *
                                static_cast<std::size_t>(c),
                            static_cast<std::size_t>(c));
    if (detail::true_rank(row, c, preds.labels[static_cast<std::size_t>(i)]) <=
        k) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

/// Entry (i, j) counts samples of true class i predicted as class j
/// under top-1 with the shared tie rule.
inline std::vector<std::vector<long long>> confusion_matrix(
    const PredictionSet& preds) {
  validate_predictions(preds);
  int n = preds.logits.dim(0), c = preds.logits.dim(1);
  std::vector<std::vector<long long>> m(
      static_cast<std::size_t>(c),
      std::vector<long long>(static_cast<std::size_t>(c), 0));
  auto data = preds.logits.data();
  for (int i = 0; i < n; ++i) {
    auto row = data.subspan(static_cast<std::size_t>(i) *
                                static_cast<std::size_t>(c),
                            static_cast<std::size_t>(c));
    int pred = detail::argmax_class(row, c);
    ++m[static_cast<std::size_t>(preds.labels[static_cast<std::size_t>(i)])]
       [static_cast<std::size_t>(pred)];
  }
  return m;
}

/// Diagonal over row sum per class. Classes with no true samples are
/// omitted rather than reported as zero.
inline std::map<int, double> per_class_accuracy(
    const std::vector<std::vector<long long>>& confusion) {
  std::map<int, double> out;
  for (std::size_t i = 0; i < confusion.size(); ++i) {
    long long row = 0;
    for (long long v : confusion[i]) row += v;
    if (row > 0) {
      out[static_cast<int>(i)] =
          static_cast<double>(confusion[i][i]) / static_cast<double>(row);
    }
  }
  return out;
}

struct EvalMeta {
  std::string dataset_id;
  std::string arch_label;
  std::uint64_t seed = 0;
};

/// Bundle of every metric for one evaluation pass, plus provenance.
struct EvalReport {
  std::map<int, double> topk;               // k -> accuracy in [0, 1]
  std::vector<std::string> class_table;
  std::map<std::string, double> per_class;  // only classes with samples
  std::vector<std::string> absent_classes;
  std::vector<std::vector<long long>> confusion;
  int n_samples = 0;
  std::string dataset_id;
  std::string arch_label;
  std::uint64_t seed = 0;
};

/// Pure assembly of an EvalReport from scored predictions.
inline EvalReport make_report(const PredictionSet& preds,
                              const std::vector<int>& ks,
                              const EvalMeta& meta = {}) {
  validate_predictions(preds);
  EvalReport r;
  for (int k : ks) r.topk[k] = topk_accuracy(preds, k);
  r.class_table = preds.class_table;
  r.confusion = confusion_matrix(preds);
  for (const auto& [idx, acc] : per_class_accuracy(r.confusion)) {
    r.per_class[preds.class_table[static_cast<std::size_t>(idx)]] = acc;
  }
  for (const auto& name : preds.class_table) {
    if (!r.per_class.count(name)) r.absent_classes.push_back(name);
  }
  r.n_samples = preds.logits.dim(0);
  r.dataset_id = meta.dataset_id;
  r.arch_label = meta.arch_label;
  r.seed = meta.seed;
  return r;
}

/// Eval-phase forward over the whole split exactly once, then metric
/// assembly. The model's class count must match the manifest's.
template <typename T>
EvalReport evaluate(nn::ModelState<T>& model, const data::Manifest& manifest,
                    data::Split split, const std::vector<int>& ks,
                    int batch_size = 32, const EvalMeta& meta = {}) {
  if (model.spec.num_classes !=
      static_cast<int>(manifest.class_table.size())) {
    throw CompatError("evaluate: model has " +
                      std::to_string(model.spec.num_classes) +
                      " classes but the manifest has " +
                      std::to_string(manifest.class_table.size()));
  }
  nn::NoGradGuard guard;
  data::BatchIterator it(manifest, split, batch_size, model.spec.input_side,
                         0, 0, /*shuffle=*/false);
  PredictionSet preds;
  preds.class_table = manifest.class_table;
  preds.logits = nn::Tensor<float>::zeros(
      {static_cast<int>(it.size()), model.spec.num_classes});
  auto out = preds.logits.data();
  std::size_t cursor = 0;
  while (auto batch = it.next()) {
    auto logits = nn::forward(model, batch->images, nn::Phase::Eval);
    auto rows = logits.data();
    std::copy(rows.begin(), rows.end(), out.begin() + cursor);
    cursor += rows.size();
    preds.labels.insert(preds.labels.end(), batch->labels.begin(),
                        batch->labels.end());
  }
  return make_report(preds, ks, meta);
}

}  // namespace serval::eval
