// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "serval/common.hpp"
#include "serval/nets.hpp"
#include "serval/rng.hpp"
#include "serval/synth.hpp"
#include "serval/trainer.hpp"

namespace serval::cli {

/// How cmd_train uses the architecture and checkpoint.
enum class TrainMode { Scratch, FeatureExtraction, Finetune };

inline std::string train_mode_to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Scratch: return "scratch";
    case TrainMode::FeatureExtraction: return "feature-extraction";
    case TrainMode::Finetune: return "finetune";
  }
  throw Error("train_mode_to_string: invalid mode");
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "scratch") return TrainMode::Scratch;
  if (s == "feature-extraction") return TrainMode::FeatureExtraction;
  if (s == "finetune") return TrainMode::Finetune;
  throw ConfigError("unknown train mode '" + s +
                    "' (expected scratch, feature-extraction, or finetune)");
}

/// One run, fully described. A single global seed fans out to labeled
/// sub-seeds (synth, init, train) so components never share streams.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir;
  std::string manifest_path;  // exclusive with synth
  std::optional<data::SynthSceneConfig> synth;
  nn::ArchitectureSpec arch;
  nn::TrainConfig train;
  TrainMode train_mode = TrainMode::Scratch;
  std::string init_checkpoint;
  int patience = 1;
  double min_delta = 0.0;
  std::vector<int> ks = {1, 5};
  int eval_batch_size = 32;

  std::uint64_t synth_seed() const { return sub_seed(seed, "synth", 0); }
  std::uint64_t init_seed() const { return sub_seed(seed, "init", 0); }
  std::uint64_t train_seed() const { return sub_seed(seed, "train", 0); }
};

namespace detail {

inline void check_keys(const nlohmann::json& j,
                       const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError("config: section '" + where + "' must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key)) {
      throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad value for '" + key + "': " + e.what());
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(j, {"seed", "output_dir", "dataset", "architecture",
                         "train", "finetune", "eval"},
                     "the top level");
  RunConfig c;
  c.seed = detail::get_or<std::uint64_t>(j, "seed", 0);
  c.output_dir = detail::get_or<std::string>(j, "output_dir", "");

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::check_keys(d, {"manifest", "synth"}, "dataset");
    if (d.contains("manifest") == d.contains("synth")) {
      throw ConfigError("config: dataset needs exactly one of 'manifest' "
                        "or 'synth'");
    }
    if (d.contains("manifest")) {
      c.manifest_path = d.at("manifest").get<std::string>();
    } else {
      const auto& s = d.at("synth");
      detail::check_keys(s, {"num_classes", "image_side", "train_per_class",
                             "eval_per_class", "empty_frame", "occlusion",
                             "blur", "overexposure", "partial_body",
                             "grayscale_night", "far_small"},
                         "dataset.synth");
      data::SynthSceneConfig sc;
      sc.num_classes = detail::get_or(s, "num_classes", sc.num_classes);
      sc.image_side = detail::get_or(s, "image_side", sc.image_side);
      sc.train_per_class =
          detail::get_or(s, "train_per_class", sc.train_per_class);
      sc.eval_per_class =
          detail::get_or(s, "eval_per_class", sc.eval_per_class);
      sc.empty_frame = detail::get_or(s, "empty_frame", sc.empty_frame);
      sc.occlusion = detail::get_or(s, "occlusion", sc.occlusion);
      sc.blur = detail::get_or(s, "blur", sc.blur);
      sc.overexposure = detail::get_or(s, "overexposure", sc.overexposure);
      sc.partial_body = detail::get_or(s, "partial_body", sc.partial_body);
      sc.grayscale_night =
          detail::get_or(s, "grayscale_night", sc.grayscale_night);
      sc.far_small = detail::get_or(s, "far_small", sc.far_small);
      sc.seed = c.synth_seed();
      c.synth = sc;
    }
  }

  if (j.contains("architecture")) {
    const auto& a = j.at("architecture");
    detail::check_keys(a, {"family", "depth_units", "input_side",
                           "input_channels", "num_classes", "dropout_p",
                           "width_base"},
                       "architecture");
    if (a.contains("family")) {
      c.arch.family =
          nn::family_from_string(a.at("family").get<std::string>());
    }
    c.arch.depth_units = detail::get_or(a, "depth_units", c.arch.depth_units);
    c.arch.input_side = detail::get_or(a, "input_side", c.arch.input_side);
    c.arch.input_channels =
        detail::get_or(a, "input_channels", c.arch.input_channels);
    c.arch.num_classes = detail::get_or(a, "num_classes", c.arch.num_classes);
    c.arch.dropout_p = detail::get_or(a, "dropout_p", c.arch.dropout_p);
    c.arch.width_base = detail::get_or(a, "width_base", c.arch.width_base);
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::check_keys(t, {"base_lr", "pretrained_lr_scale", "momentum",
                           "weight_decay", "step_size", "gamma",
                           "epochs_per_round", "batch_size", "mode",
                           "init_checkpoint"},
                       "train");
    c.train.base_lr = detail::get_or(t, "base_lr", c.train.base_lr);
    c.train.pretrained_lr_scale =
        detail::get_or(t, "pretrained_lr_scale", c.train.pretrained_lr_scale);
    c.train.momentum = detail::get_or(t, "momentum", c.train.momentum);
    c.train.weight_decay =
        detail::get_or(t, "weight_decay", c.train.weight_decay);
    c.train.step_size = detail::get_or(t, "step_size", c.train.step_size);
    c.train.gamma = detail::get_or(t, "gamma", c.train.gamma);
    c.train.epochs_per_round =
        detail::get_or(t, "epochs_per_round", c.train.epochs_per_round);
    c.train.batch_size = detail::get_or(t, "batch_size", c.train.batch_size);
    if (t.contains("mode")) {
      c.train_mode = train_mode_from_string(t.at("mode").get<std::string>());
    }
    c.init_checkpoint = detail::get_or<std::string>(t, "init_checkpoint", "");
  }
  c.train.seed = c.train_seed();

  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    detail::check_keys(f, {"patience", "min_delta"}, "finetune");
    c.patience = detail::get_or(f, "patience", c.patience);
    c.min_delta = detail::get_or(f, "min_delta", c.min_delta);
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::check_keys(e, {"ks", "batch_size"}, "eval");
    c.ks = detail::get_or(e, "ks", c.ks);
    c.eval_batch_size = detail::get_or(e, "batch_size", c.eval_batch_size);
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: '" + path + "' is not valid json: " +
                      e.what());
  }
  return parse_run_config(j);
}

/// Full materialization of the config with every default and derived
/// sub-seed filled in; written into the output directory by each
/// command so a run can be reproduced from its artifacts alone.
inline std::string resolved_config_text(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  if (c.synth) {
    nlohmann::ordered_json s;
    s["num_classes"] = c.synth->num_classes;
    s["image_side"] = c.synth->image_side;
    s["train_per_class"] = c.synth->train_per_class;
    s["eval_per_class"] = c.synth->eval_per_class;
    s["empty_frame"] = c.synth->empty_frame;
    s["occlusion"] = c.synth->occlusion;
    s["blur"] = c.synth->blur;
    s["overexposure"] = c.synth->overexposure;
    s["partial_body"] = c.synth->partial_body;
    s["grayscale_night"] = c.synth->grayscale_night;
    s["far_small"] = c.synth->far_small;
    j["dataset"]["synth"] = s;
  } else if (!c.manifest_path.empty()) {
    j["dataset"]["manifest"] = c.manifest_path;
  }
  j["architecture"] = {{"family", nn::family_to_string(c.arch.family)},
                       {"depth_units", c.arch.depth_units},
                       {"input_side", c.arch.input_side},
                       {"input_channels", c.arch.input_channels},
                       {"num_classes", c.arch.num_classes},
                       {"dropout_p", c.arch.dropout_p},
                       {"width_base", c.arch.width_base}};
  j["train"] = {{"base_lr", c.train.base_lr},
                {"pretrained_lr_scale", c.train.pretrained_lr_scale},
                {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay},
                {"step_size", c.train.step_size},
                {"gamma", c.train.gamma},
                {"epochs_per_round", c.train.epochs_per_round},
                {"batch_size", c.train.batch_size},
                {"mode", train_mode_to_string(c.train_mode)},
                {"init_checkpoint", c.init_checkpoint}};
  j["finetune"] = {{"patience", c.patience}, {"min_delta", c.min_delta}};
  j["eval"] = {{"ks", c.ks}, {"batch_size", c.eval_batch_size}};
  j["derived_seeds"] = {{"synth", c.synth_seed()},
                        {"init", c.init_seed()},
                        {"train", c.train_seed()}};
  return j.dump(2) + "\n";
}

/// Output directory resolution: explicit flag beats the config value;
/// a relative config value lands under $SERVAL_OUT_ROOT when that is
/// set.
inline std::string resolve_output_dir(const RunConfig& c,
                                      const std::string& cli_override) {
  std::string dir = cli_override.empty() ? c.output_dir : cli_override;
  if (dir.empty()) {
    throw ConfigError("config: no output directory (set output_dir or "
                      "pass --out)");
  }
  if (cli_override.empty() &&
      std::filesystem::path(dir).is_relative()) {
    if (const char* root = std::getenv("SERVAL_OUT_ROOT")) {
      dir = (std::filesystem::path(root) / dir).string();
    }
  }
  return dir;
}

inline void write_resolved_config(const RunConfig& c,
                                  const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream out(std::filesystem::path(out_dir) / "resolved_config.json",
                    std::ios::binary);
  if (!out) {
    throw IoError("config: cannot write resolved config into '" + out_dir +
                  "'");
  }
  auto text = resolved_config_text(c);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace serval::cli
