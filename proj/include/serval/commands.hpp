// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "serval/checkpoint.hpp"
#include "serval/config.hpp"
#include "serval/gradcheck.hpp"
#include "serval/metrics.hpp"
#include "serval/partition.hpp"
#include "serval/report.hpp"
#include "serval/synth.hpp"
#include "serval/trainer.hpp"

namespace serval::cli {

namespace detail {

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

inline std::string class_count_text(const data::Manifest& m) {
  std::string out = "class,train,eval\n";
  for (const auto& [cls, c] : data::class_counts(m)) {
    out += cls + "," + std::to_string(c.first) + "," +
           std::to_string(c.second) + "\n";
  }
  return out;
}

inline std::string condition_count_text(const data::Manifest& m) {
  int empty = 0, night = 0, cropped = 0;
  for (const auto& r : m.records) {
    empty += !r.foreground;
    night += r.grayscale;
    cropped += r.crop_box.has_value();
  }
  std::string out = "condition,count\n";
  out += "empty_frame," + std::to_string(empty) + "\n";
  out += "grayscale_night," + std::to_string(night) + "\n";
  out += "crop_box," + std::to_string(cropped) + "\n";
  return out;
}

/// Dataset from a run config: either a manifest on disk or a synthetic
/// set generated (deterministically) under the output directory.
inline data::Manifest dataset_for(const RunConfig& cfg,
                                  const std::string& out_dir) {
  if (cfg.synth) {
    auto dir = (std::filesystem::path(out_dir) / "dataset").string();
    auto m = data::synth_generate(*cfg.synth, dir);
    data::save_manifest(m, (std::filesystem::path(dir) /
                            "manifest.jsonl").string());
    return m;
  }
  if (cfg.manifest_path.empty()) {
    throw ConfigError("config: no dataset section");
  }
  return data::load_manifest(cfg.manifest_path);
}

inline nn::ModelState<float> model_from_checkpoint_for(
    const RunConfig& cfg, const std::string& checkpoint_path,
    const data::Manifest& manifest) {
  if (checkpoint_path.empty()) {
    throw ConfigError("train: this mode needs an initial checkpoint "
                      "(train.init_checkpoint or --checkpoint)");
  }
  auto loaded = nn::load_checkpoint<float>(checkpoint_path);
  return nn::replace_classifier_head(
      loaded.model, static_cast<int>(manifest.class_table.size()),
      cfg.init_seed());
}

}  // namespace detail

/// Generates a synthetic scene set plus manifest and prints count
/// summaries.
inline void cmd_synth(const RunConfig& cfg, const std::string& out_override,
                      std::ostream& out = std::cout) {
  if (!cfg.synth) {
    throw ConfigError("synth: config has no dataset.synth section");
  }
  auto dir = resolve_output_dir(cfg, out_override);
  write_resolved_config(cfg, dir);
  auto manifest = detail::dataset_for(cfg, dir);
  auto violations = data::validate_manifest(manifest);
  if (!violations.empty()) {
    std::string msg = "synth: generated manifest failed validation:";
    for (const auto& v : violations) msg += "\n  " + v;
    throw DataError(msg);
  }
  out << detail::class_count_text(manifest)
      << detail::condition_count_text(manifest);
}

/// Applies one of the four conditionings to a manifest and writes the
/// partitioned manifest plus a count report.
inline void cmd_dataset(const std::string& manifest_path,
                        const std::string& mode_str, int train_quota,
                        int eval_quota, std::uint64_t seed,
                        const std::string& out_dir,
                        std::ostream& out = std::cout) {
  auto full = data::load_manifest(manifest_path);
  data::PartitionSpec spec;
  spec.mode = data::partition_mode_from_string(mode_str);
  spec.train_quota = train_quota;
  spec.eval_quota = eval_quota;
  spec.seed = seed;
  data::PartitionReport report;
  auto part = data::build_partition(full, spec, &report);
  if (part.records.empty()) {
    throw DataError("dataset: " + mode_str +
                    " left no records; exclusion report:\n" +
                    report.to_text());
  }
  // The partitioned manifest usually lands away from the images, so
  // relative uris are pinned to the source manifest's location.
  for (auto& r : part.records) {
    r.uri = std::filesystem::absolute(full.resolve_uri(r))
                .lexically_normal().string();
  }
  std::filesystem::create_directories(out_dir);
  data::save_manifest(part, (std::filesystem::path(out_dir) /
                             "manifest.jsonl").string());
  detail::write_text((std::filesystem::path(out_dir) /
                      "partition_report.csv").string(),
                     report.to_text());
  out << report.to_text();
}

/// Pretrains from scratch, fits a head on frozen features, or runs the
/// progressive fine-tune, per the config's train.mode. Always writes a
/// checkpoint and a history file.
inline void cmd_train(const RunConfig& cfg, const std::string& out_override,
                      const std::string& checkpoint_override = "",
                      std::ostream& out = std::cout) {
  auto dir = resolve_output_dir(cfg, out_override);
  write_resolved_config(cfg, dir);
  auto manifest = detail::dataset_for(cfg, dir);
  int n_classes = static_cast<int>(manifest.class_table.size());
  auto init_path = checkpoint_override.empty() ? cfg.init_checkpoint
                                               : checkpoint_override;

  nn::ModelState<float> model;
  std::vector<nn::EpochStats> history;
  std::string extra_text;
  switch (cfg.train_mode) {
    case TrainMode::Scratch: {
      if (cfg.arch.num_classes != n_classes) {
        throw CompatError("train: architecture has " +
                          std::to_string(cfg.arch.num_classes) +
                          " classes but the manifest has " +
                          std::to_string(n_classes));
      }
      model = nn::build_architecture<float>(cfg.arch, cfg.init_seed());
      history = nn::train(model, manifest, cfg.train,
                          nn::ordered_param_groups(model));
      break;
    }
    case TrainMode::FeatureExtraction: {
      model = detail::model_from_checkpoint_for(cfg, init_path, manifest);
      nn::set_trainable_first_groups(model, 1);
      history = nn::feature_extraction_fit(model, manifest, cfg.train);
      break;
    }
    case TrainMode::Finetune: {
      model = detail::model_from_checkpoint_for(cfg, init_path, manifest);
      auto [best, state] = nn::progressive_finetune(
          model, manifest, cfg.train, cfg.patience, cfg.min_delta);
      model = std::move(best);
      extra_text = "round,unfrozen,eval_top1\n";
      for (std::size_t r = 0; r < state.history.size(); ++r) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.8g", state.history[r]);
        extra_text += std::to_string(r) + "," + std::to_string(r + 1) +
                      "," + buf + "\n";
      }
      extra_text += "best_round," + std::to_string(state.best_round) + "\n";
      extra_text += "stop_reason," + state.stop_reason + "\n";
      break;
    }
  }

  nn::save_checkpoint(model, (std::filesystem::path(dir) /
                              "checkpoint.ckpt").string(),
                      resolved_config_text(cfg));
  detail::write_text((std::filesystem::path(dir) / "history.txt").string(),
                     nn::history_to_text(history));
  if (!extra_text.empty()) {
    detail::write_text((std::filesystem::path(dir) /
                        "finetune.txt").string(),
                       extra_text);
  }
  out << nn::history_to_text(history) << extra_text;
}

/// Progressive fine-tune from an explicit checkpoint; sugar over
/// cmd_train with mode forced to finetune.
inline void cmd_finetune(RunConfig cfg, const std::string& checkpoint_path,
                         const std::string& out_override,
                         std::ostream& out = std::cout) {
  cfg.train_mode = TrainMode::Finetune;
  cmd_train(cfg, out_override, checkpoint_path, out);
}

/// Evaluates a checkpoint on the config's dataset and writes the
/// structured report plus the per-class CSV.
inline void cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path,
                     const std::string& split_str,
                     const std::string& out_override,
                     std::ostream& out = std::cout) {
  auto dir = resolve_output_dir(cfg, out_override);
  write_resolved_config(cfg, dir);
  auto manifest = detail::dataset_for(cfg, dir);
  if (checkpoint_path.empty()) {
    throw ConfigError("eval: --checkpoint is required");
  }
  auto loaded = nn::load_checkpoint<float>(checkpoint_path);
  eval::EvalMeta meta;
  meta.dataset_id = cfg.synth ? "synth" : cfg.manifest_path;
  meta.arch_label = nn::family_to_string(loaded.model.spec.family);
  meta.seed = cfg.seed;
  auto report = eval::evaluate(loaded.model, manifest,
                               data::split_from_string(split_str), cfg.ks,
                               cfg.eval_batch_size, meta);
  eval::emit_report(report, "structured-text",
                    (std::filesystem::path(dir) /
                     "eval_report.json").string());
  eval::emit_report(report, "csv",
                    (std::filesystem::path(dir) / "per_class.csv").string());
  for (const auto& [k, acc] : report.topk) {
    out << "top" << k << "," << eval::percent_str(acc) << "\n";
  }
}

/// Renders the bar-data CSV (one row per report) and a per-class CSV
/// for each input report.
inline void cmd_report(const std::vector<std::string>& report_paths,
                       const std::string& out_dir,
                       std::ostream& out = std::cout) {
  if (report_paths.empty()) {
    throw ConfigError("report: no input reports given");
  }
  std::vector<eval::EvalReport> reports;
  for (const auto& p : report_paths) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("report: cannot open '" + p + "'");
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    reports.push_back(eval::report_from_text(text, p));
  }
  std::filesystem::create_directories(out_dir);
  eval::emit_bar_csv(reports, (std::filesystem::path(out_dir) /
                               "bars.csv").string());
  for (std::size_t i = 0; i < reports.size(); ++i) {
    auto label = reports[i].arch_label.empty()
                     ? std::to_string(i)
                     : reports[i].arch_label;
    eval::emit_report(reports[i], "csv",
                      (std::filesystem::path(out_dir) /
                       ("per_class_" + label + ".csv")).string());
  }
  out << eval::bar_csv(reports);
}

/// Finite-difference self-check over every op and the requested model
/// families; prints one line per check and the worst error.
inline void cmd_gradcheck(const std::string& family_str,
                          const std::string& corrupt_op = "",
                          std::ostream& out = std::cout) {
  namespace gc = nn::gradcheck;
  gc::SuiteResult suite = gc::run_op_suite(1234, corrupt_op);
  if (family_str.empty()) {
    auto models = gc::run_model_suite(1234, corrupt_op);
    suite.checks.insert(suite.checks.end(), models.checks.begin(),
                        models.checks.end());
  } else {
    auto family = nn::family_from_string(family_str);
    suite.checks.push_back(gc::check_model_family(
        family, 1234,
        "model/" + family_str == corrupt_op ? 0.05 : 0.0));
  }
  const gc::OpCheck* worst = nullptr;
  for (const auto& c : suite.checks) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", c.max_rel_err);
    out << c.name << "," << buf << "\n";
    if (!worst || c.max_rel_err > worst->max_rel_err) worst = &c;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", worst->max_rel_err);
  out << "worst," << worst->name << "," << buf << "\n";
  if (worst->max_rel_err > gc::kTolerance) {
    throw NumericError("gradcheck: '" + worst->name +
                       "' relative error " + std::string(buf) +
                       " exceeds tolerance");
  }
}

}  // namespace serval::cli
