// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "serval/commands.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitCompat = 4;
constexpr int kExitNumeric = 5;

int run(int argc, char** argv) {
  CLI::App app{"serval: species identification pipeline on a from-scratch "
               "micro deep-learning stack"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, split = "eval";
  std::string mode = "D1", family, corrupt_op;
  std::uint64_t seed = 0;
  int train_quota = 1000, eval_quota = 240;
  std::string manifest_path;
  std::vector<std::string> report_paths;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene set");
  synth->add_option("--config", config_path, "Run config (json)")
      ->required();
  synth->add_option("--out", out_dir, "Output directory override");

  auto* dataset =
      app.add_subcommand("dataset", "Apply a D1-D4 conditioning");
  dataset->add_option("--manifest", manifest_path, "Input manifest")
      ->required();
  dataset->add_option("--mode", mode, "D1, D2, D3, or D4")->required();
  dataset->add_option("--train-quota", train_quota,
                      "Per-class train images (D2)");
  dataset->add_option("--eval-quota", eval_quota,
                      "Per-class eval images (D2)");
  dataset->add_option("--seed", seed, "Sampling seed (D2)");
  dataset->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand(
      "train", "Pretrain, fit a head, or fine-tune per config mode");
  train->add_option("--config", config_path, "Run config (json)")
      ->required();
  train->add_option("--checkpoint", checkpoint,
                    "Initial checkpoint override");
  train->add_option("--out", out_dir, "Output directory override");

  auto* finetune = app.add_subcommand(
      "finetune", "Progressive last-to-first fine-tune from a checkpoint");
  finetune->add_option("--config", config_path, "Run config (json)")
      ->required();
  finetune->add_option("--checkpoint", checkpoint, "Pretrained checkpoint")
      ->required();
  finetune->add_option("--out", out_dir, "Output directory override");

  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint");
  evalc->add_option("--config", config_path, "Run config (json)")
      ->required();
  evalc->add_option("--checkpoint", checkpoint, "Checkpoint to score")
      ->required();
  evalc->add_option("--split", split, "train or eval");
  evalc->add_option("--out", out_dir, "Output directory override");

  auto* report = app.add_subcommand(
      "report", "Render bar and per-class CSVs from saved reports");
  report->add_option("reports", report_paths, "Structured report files")
      ->required();
  report->add_option("--out", out_dir, "Output directory")->required();

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "Finite-difference check of every op and model family");
  gradcheck->add_option("--arch", family,
                        "Restrict the model check to one family");
  gradcheck->add_option("--corrupt", corrupt_op, "Negative-control hook")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (synth->parsed()) {
    serval::cli::cmd_synth(serval::cli::load_run_config(config_path),
                           out_dir);
  } else if (dataset->parsed()) {
    serval::cli::cmd_dataset(manifest_path, mode, train_quota, eval_quota,
                             seed, out_dir);
  } else if (train->parsed()) {
    serval::cli::cmd_train(serval::cli::load_run_config(config_path),
                           out_dir, checkpoint);
  } else if (finetune->parsed()) {
    serval::cli::cmd_finetune(serval::cli::load_run_config(config_path),
                              checkpoint, out_dir);
  } else if (evalc->parsed()) {
    serval::cli::cmd_eval(serval::cli::load_run_config(config_path),
                          checkpoint, split, out_dir);
  } else if (report->parsed()) {
    serval::cli::cmd_report(report_paths, out_dir);
  } else if (gradcheck->parsed()) {
    serval::cli::cmd_gradcheck(family, corrupt_op);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const serval::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const serval::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const serval::CompatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCompat;
  } catch (const serval::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
}
