// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "serval/common.hpp"
#include "serval/image.hpp"

namespace serval::data {

inline constexpr const char* kManifestFormat = "camtrap-manifest/1";

struct CropBox {
  int x = 0, y = 0, w = 0, h = 0;
};

enum class Split { Train, Eval };

inline std::string split_to_string(Split s) {
  return s == Split::Train ? "train" : "eval";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "eval") return Split::Eval;
  throw DataError("unknown split '" + s + "' (expected train or eval)");
}

struct SampleRecord {
  std::string id;
  std::string uri;
  std::string species;
  std::string capture_event;
  int burst_index = 0;
  bool foreground = true;
  std::optional<CropBox> crop_box;
  bool grayscale = false;
};

struct Manifest {
  std::vector<std::string> class_table;
  std::vector<SampleRecord> records;
  std::map<std::string, Split> splits;  // record id -> split
  std::string provenance;
  bool crop_at_load = false;
  std::string base_dir;  // set on load; resolves relative uris

  std::string resolve_uri(const SampleRecord& r) const {
    std::filesystem::path p(r.uri);
    if (p.is_absolute() || base_dir.empty()) return r.uri;
    return (std::filesystem::path(base_dir) / p).string();
  }

  int class_index(const std::string& species) const {
    for (std::size_t i = 0; i < class_table.size(); ++i) {
      if (class_table[i] == species) return static_cast<int>(i);
    }
    throw DataError("species '" + species + "' is not in the class table");
  }
};

/// Full structural audit. Returns every violation found; an empty list
/// means the manifest is valid. Crop boxes are checked against actual
/// image dimensions when the referenced pixmap is readable, otherwise
/// only for plausibility.
inline std::vector<std::string> validate_manifest(const Manifest& m) {
  std::vector<std::string> out;
  std::set<std::string> classes(m.class_table.begin(), m.class_table.end());
  if (classes.size() != m.class_table.size()) {
    out.push_back("class table contains duplicate species");
  }

  std::set<std::string> ids;
  std::map<std::string, Split> event_split;
  for (const auto& r : m.records) {
    if (!ids.insert(r.id).second) {
      out.push_back("duplicate id '" + r.id + "'");
    }
    if (!classes.count(r.species)) {
      out.push_back("record '" + r.id + "': unknown species '" + r.species +
                    "'");
    }
    if (r.crop_box) {
      const auto& b = *r.crop_box;
      if (b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0) {
        out.push_back("record '" + r.id + "': degenerate crop box");
      } else {
        int iw = 0, ih = 0;
        if (probe_ppm(m.resolve_uri(r), iw, ih) &&
            (b.x + b.w > iw || b.y + b.h > ih)) {
          out.push_back("record '" + r.id + "': crop box exceeds image " +
                        std::to_string(iw) + "x" + std::to_string(ih));
        }
      }
    }
    auto split_it = m.splits.find(r.id);
    if (split_it == m.splits.end()) {
      out.push_back("record '" + r.id + "' has no split assignment");
    } else if (!r.capture_event.empty()) {
      auto [it, inserted] =
          event_split.emplace(r.capture_event, split_it->second);
      if (!inserted && it->second != split_it->second) {
        out.push_back("capture-event leakage: event '" + r.capture_event +
                      "' spans train and eval");
      }
    }
  }
  for (const auto& [id, split] : m.splits) {
    (void)split;
    if (!ids.count(id)) {
      out.push_back("split entry for unknown record '" + id + "'");
    }
  }
  return out;
}

/// One header object plus one record object per line.
inline void save_manifest(const Manifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw IoError("save_manifest: cannot open '" + path + "' for writing");
  }
  nlohmann::json header{{"format", kManifestFormat},
                        {"class_table", m.class_table},
                        {"provenance", m.provenance},
                        {"crop_at_load", m.crop_at_load}};
  out << header.dump() << "\n";
  for (const auto& r : m.records) {
    nlohmann::json j{{"id", r.id},
                     {"uri", r.uri},
                     {"species", r.species},
                     {"capture_event", r.capture_event},
                     {"burst_index", r.burst_index},
                     {"foreground", r.foreground},
                     {"grayscale", r.grayscale}};
    if (r.crop_box) {
      j["crop_box"] = {r.crop_box->x, r.crop_box->y, r.crop_box->w,
                       r.crop_box->h};
    }
    auto split = m.splits.find(r.id);
    if (split != m.splits.end()) {
      j["split"] = split_to_string(split->second);
    }
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("save_manifest: short write to '" + path + "'");
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_manifest: cannot open '" + path + "'");
  Manifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();

  std::string line;
  int line_no = 0;
  auto parse = [&](const std::string& text) {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("load_manifest: '" + path + "' line " +
                      std::to_string(line_no) + ": " + e.what());
    }
  };

  if (!std::getline(in, line)) {
    throw DataError("load_manifest: '" + path + "' is empty");
  }
  ++line_no;
  auto header = parse(line);
  std::string format = header.value("format", "");
  if (format != kManifestFormat) {
    throw DataError("load_manifest: '" + path + "': unsupported format '" +
                    format + "' (expected " + kManifestFormat + ")");
  }
  m.class_table = header.at("class_table").get<std::vector<std::string>>();
  m.provenance = header.value("provenance", "");
  m.crop_at_load = header.value("crop_at_load", false);

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto j = parse(line);
    SampleRecord r;
    try {
      r.id = j.at("id").get<std::string>();
      r.uri = j.at("uri").get<std::string>();
      r.species = j.at("species").get<std::string>();
      r.capture_event = j.value("capture_event", "");
      r.burst_index = j.value("burst_index", 0);
      r.foreground = j.value("foreground", true);
      r.grayscale = j.value("grayscale", false);
      if (j.contains("crop_box")) {
        auto b = j.at("crop_box");
        r.crop_box = CropBox{b.at(0).get<int>(), b.at(1).get<int>(),
                             b.at(2).get<int>(), b.at(3).get<int>()};
      }
      if (j.contains("split")) {
        m.splits[r.id] = split_from_string(j.at("split").get<std::string>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("load_manifest: '" + path + "' line " +
                      std::to_string(line_no) + ": " + e.what());
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

/// Per-class (train, eval) record counts in class-table order.
inline std::map<std::string, std::pair<int, int>> class_counts(
    const Manifest& m) {
  std::map<std::string, std::pair<int, int>> counts;
  for (const auto& c : m.class_table) counts[c] = {0, 0};
  for (const auto& r : m.records) {
    auto it = m.splits.find(r.id);
    if (it == m.splits.end()) continue;
    auto& entry = counts[r.species];
    if (it->second == Split::Train) {
      entry.first += 1;
    } else {
      entry.second += 1;
    }
  }
  return counts;
}

}  // namespace serval::data
