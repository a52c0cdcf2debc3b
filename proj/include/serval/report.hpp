// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "serval/common.hpp"
#include "serval/metrics.hpp"

namespace serval::eval {

/// Half-up rounding of a [0, 1] fraction to one decimal of percent.
inline double round_percent(double fraction) {
  return std::floor(fraction * 1000.0 + 0.5) / 10.0;
}

inline std::string percent_str(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", round_percent(fraction));
  return buf;
}

/// Per-class accuracy table in class_table order, one decimal of
/// percent per value. Classes without samples are left out.
inline std::string per_class_csv(const EvalReport& report) {
  std::string out = "species,accuracy_percent\n";
  for (const auto& name : report.class_table) {
    auto it = report.per_class.find(name);
    if (it == report.per_class.end()) continue;
    out += name + "," + percent_str(it->second) + "\n";
  }
  return out;
}

/// Overlapped-bars data: one row per report, labelled by architecture,
/// with Top-1 and Top-5 percent columns.
inline std::string bar_csv(const std::vector<EvalReport>& reports) {
  std::string out = "architecture,top1_percent,top5_percent\n";
  for (const auto& r : reports) {
    auto t1 = r.topk.find(1);
    auto t5 = r.topk.find(5);
    if (t1 == r.topk.end() || t5 == r.topk.end()) {
      throw ConfigError("bar_csv: report '" + r.arch_label +
                        "' is missing Top-1 or Top-5");
    }
    out += r.arch_label + "," + percent_str(t1->second) + "," +
           percent_str(t5->second) + "\n";
  }
  return out;
}

/// Combined structured-text report: metrics, confusion and provenance
/// in one deterministic json document.
inline std::string report_text(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["dataset"] = report.dataset_id;
  j["architecture"] = report.arch_label;
  j["seed"] = report.seed;
  j["n_samples"] = report.n_samples;
  nlohmann::ordered_json topk = nlohmann::ordered_json::object();
  for (const auto& [k, acc] : report.topk) {
    topk["top" + std::to_string(k)] = acc;
  }
  j["topk"] = topk;
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  double macro = 0;
  for (const auto& name : report.class_table) {
    auto it = report.per_class.find(name);
    if (it == report.per_class.end()) continue;
    per_class[name] = it->second;
    macro += it->second;
  }
  j["per_class"] = per_class;
  j["macro_per_class"] =
      report.per_class.empty()
          ? 0.0
          : macro / static_cast<double>(report.per_class.size());
  j["absent_classes"] = report.absent_classes;
  j["class_table"] = report.class_table;
  j["confusion"] = report.confusion;
  return j.dump(2) + "\n";
}

namespace detail {

inline void write_text_file(const std::string& path,
                            const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("report: cannot open '" + path + "' for writing");
  }
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("report: short write to '" + path + "'");
}

}  // namespace detail

/// Writes one report as either the per-class CSV ("csv") or the
/// combined json bundle ("structured-text").
inline void emit_report(const EvalReport& report, const std::string& format,
                        const std::string& path) {
  if (format == "csv") {
    detail::write_text_file(path, per_class_csv(report));
  } else if (format == "structured-text") {
    detail::write_text_file(path, report_text(report));
  } else {
    throw ConfigError("emit_report: unknown format '" + format +
                      "' (expected csv or structured-text)");
  }
}

inline void emit_bar_csv(const std::vector<EvalReport>& reports,
                         const std::string& path) {
  detail::write_text_file(path, bar_csv(reports));
}

/// Inverse of report_text, for re-rendering saved reports.
inline EvalReport report_from_text(const std::string& text,
                                   const std::string& origin = "report") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": not a valid report: " + e.what());
  }
  EvalReport r;
  try {
    r.dataset_id = j.value("dataset", "");
    r.arch_label = j.value("architecture", "");
    r.seed = j.value("seed", std::uint64_t{0});
    r.n_samples = j.value("n_samples", 0);
    for (const auto& [key, acc] : j.at("topk").items()) {
      if (key.rfind("top", 0) != 0) {
        throw DataError(origin + ": bad topk key '" + key + "'");
      }
      r.topk[std::stoi(key.substr(3))] = acc.get<double>();
    }
    if (j.contains("class_table")) {
      r.class_table = j.at("class_table").get<std::vector<std::string>>();
    }
    for (const auto& [name, acc] : j.at("per_class").items()) {
      r.per_class[name] = acc.get<double>();
    }
    if (r.class_table.empty()) {
      for (const auto& [name, acc] : r.per_class) {
        (void)acc;
        r.class_table.push_back(name);
      }
    }
    if (j.contains("absent_classes")) {
      r.absent_classes =
          j.at("absent_classes").get<std::vector<std::string>>();
    }
    if (j.contains("confusion")) {
      r.confusion =
          j.at("confusion").get<std::vector<std::vector<long long>>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed report: " + e.what());
  }
  return r;
}

}  // namespace serval::eval
