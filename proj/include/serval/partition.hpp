// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "serval/common.hpp"
#include "serval/manifest.hpp"
#include "serval/rng.hpp"

namespace serval::data {

/// The four dataset conditionings: D1 keeps the native class imbalance,
/// D2 samples balanced per-class quotas, D3 keeps foreground subjects
/// only, D4 keeps records with a segmentation crop and crops at load.
enum class PartitionMode { D1, D2, D3, D4 };

inline std::string partition_mode_to_string(PartitionMode m) {
  switch (m) {
    case PartitionMode::D1: return "D1";
    case PartitionMode::D2: return "D2";
    case PartitionMode::D3: return "D3";
    case PartitionMode::D4: return "D4";
  }
  throw Error("partition_mode_to_string: invalid mode");
}

inline PartitionMode partition_mode_from_string(const std::string& s) {
  if (s == "D1") return PartitionMode::D1;
  if (s == "D2") return PartitionMode::D2;
  if (s == "D3") return PartitionMode::D3;
  if (s == "D4") return PartitionMode::D4;
  throw ConfigError("unknown partition mode '" + s +
                    "' (expected D1, D2, D3, or D4)");
}

struct PartitionSpec {
  PartitionMode mode = PartitionMode::D1;
  int train_quota = 0;  // D2 only
  int eval_quota = 0;   // D2 only
  std::uint64_t seed = 0;
};

struct PartitionReport {
  std::map<std::string, std::pair<int, int>> counts;  // class -> train, eval
  // D2 counts images while sampling whole capture events; when a quota
  // cannot be met exactly on an event boundary the signed difference per
  // class lands here.
  std::map<std::string, std::pair<int, int>> quota_deviation;
  int excluded_missing_crop = 0;  // D4
  int dropped_records = 0;        // records filtered out by the mode

  std::string to_text() const {
    std::ostringstream out;
    out << "class,train,eval\n";
    for (const auto& [cls, c] : counts) {
      out << cls << "," << c.first << "," << c.second << "\n";
    }
    for (const auto& [cls, d] : quota_deviation) {
      if (d.first != 0 || d.second != 0) {
        out << "# quota deviation " << cls << ": train " << d.first
            << ", eval " << d.second << "\n";
      }
    }
    if (excluded_missing_crop > 0) {
      out << "# excluded for missing crop box: " << excluded_missing_crop
          << "\n";
    }
    if (dropped_records > 0) {
      out << "# records dropped by conditioning: " << dropped_records << "\n";
    }
    return out.str();
  }
};

namespace detail {

struct EventGroup {
  std::string event;
  std::vector<std::size_t> record_indices;
};

/// Record indices grouped into capture events per (class, split), in
/// first-appearance order. Records without an event id form singleton
/// groups.
inline std::vector<EventGroup> events_of(
    const Manifest& m, const std::string& species, Split split) {
  std::vector<EventGroup> groups;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    if (r.species != species) continue;
    auto it = m.splits.find(r.id);
    if (it == m.splits.end() || it->second != split) continue;
    if (r.capture_event.empty()) {
      groups.push_back({"", {i}});
      continue;
    }
    auto [pos, inserted] = index.emplace(r.capture_event, groups.size());
    if (inserted) groups.push_back({r.capture_event, {}});
    groups[pos->second].record_indices.push_back(i);
  }
  return groups;
}

/// Greedy whole-event selection toward an exact image quota: a first
/// pass takes events while they fit, then the remainder is patched with
/// the events that minimize the overshoot. Returns selected record
/// indices; `deviation` is selected-minus-quota.
inline std::vector<std::size_t> take_events(std::vector<EventGroup> groups,
                                            int quota, Rng& rng,
                                            int& deviation) {
  rng.shuffle(groups);
  std::vector<std::size_t> picked;
  std::vector<EventGroup> rest;
  int count = 0;
  for (auto& g : groups) {
    int size = static_cast<int>(g.record_indices.size());
    if (count + size <= quota) {
      picked.insert(picked.end(), g.record_indices.begin(),
                    g.record_indices.end());
      count += size;
    } else {
      rest.push_back(std::move(g));
    }
  }
  while (count < quota && !rest.empty()) {
    int gap = quota - count;
    std::size_t best = 0;
    for (std::size_t i = 1; i < rest.size(); ++i) {
      int bs = static_cast<int>(rest[best].record_indices.size());
      int is = static_cast<int>(rest[i].record_indices.size());
      if (std::abs(is - gap) < std::abs(bs - gap)) best = i;
    }
    int size = static_cast<int>(rest[best].record_indices.size());
    if (size - gap >= gap) break;  // overshoot would exceed the shortfall
    picked.insert(picked.end(), rest[best].record_indices.begin(),
                  rest[best].record_indices.end());
    count += size;
    rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(best));
  }
  deviation = count - quota;
  return picked;
}

inline Manifest keep_records(const Manifest& src,
                             std::vector<std::size_t> indices) {
  std::sort(indices.begin(), indices.end());
  Manifest out;
  out.class_table = src.class_table;
  out.provenance = src.provenance;
  out.crop_at_load = src.crop_at_load;
  out.base_dir = src.base_dir;
  for (std::size_t i : indices) {
    const auto& r = src.records[i];
    out.records.push_back(r);
    auto it = src.splits.find(r.id);
    if (it != src.splits.end()) out.splits[r.id] = it->second;
  }
  return out;
}

}  // namespace detail

/// Applies one conditioning mode to a full manifest. `report`, when
/// given, receives per-class counts and the bookkeeping the mode
/// produced.
inline Manifest build_partition(const Manifest& full, const PartitionSpec& spec,
                                PartitionReport* report = nullptr) {
  Manifest out;
  PartitionReport local;
  switch (spec.mode) {
    case PartitionMode::D1:
      out = full;
      break;
    case PartitionMode::D2: {
      if (spec.train_quota <= 0 || spec.eval_quota <= 0) {
        throw ConfigError("build_partition: D2 quotas must be positive");
      }
      std::vector<std::size_t> keep;
      for (const auto& cls : full.class_table) {
        for (Split split : {Split::Train, Split::Eval}) {
          bool train = split == Split::Train;
          int quota = train ? spec.train_quota : spec.eval_quota;
          auto groups = detail::events_of(full, cls, split);
          int supply = 0;
          for (const auto& g : groups) {
            supply += static_cast<int>(g.record_indices.size());
          }
          if (supply < quota) {
            throw DataError("build_partition: class '" + cls + "' has only " +
                            std::to_string(supply) + " " +
                            split_to_string(split) + " records, " +
                            std::to_string(quota - supply) +
                            " short of the quota of " + std::to_string(quota));
          }
          Rng rng(sub_seed(spec.seed,
                           "partition.d2." + cls + "." +
                               split_to_string(split)));
          int deviation = 0;
          auto picked =
              detail::take_events(std::move(groups), quota, rng, deviation);
          keep.insert(keep.end(), picked.begin(), picked.end());
          auto& dev = local.quota_deviation[cls];
          (train ? dev.first : dev.second) = deviation;
        }
      }
      out = detail::keep_records(full, std::move(keep));
      break;
    }
    case PartitionMode::D3: {
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < full.records.size(); ++i) {
        if (full.records[i].foreground) keep.push_back(i);
      }
      local.dropped_records =
          static_cast<int>(full.records.size() - keep.size());
      out = detail::keep_records(full, std::move(keep));
      break;
    }
    case PartitionMode::D4: {
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < full.records.size(); ++i) {
        if (full.records[i].crop_box) {
          keep.push_back(i);
        } else {
          local.excluded_missing_crop += 1;
        }
      }
      local.dropped_records = local.excluded_missing_crop;
      out = detail::keep_records(full, std::move(keep));
      out.crop_at_load = true;
      break;
    }
  }
  local.counts = class_counts(out);
  if (report) *report = std::move(local);
  return out;
}

/// Burst-coherent per-class split: whole capture events are assigned so
/// that each class's eval share is within one record of
/// eval_fraction * class size.
inline std::map<std::string, Split> stratified_split(
    const std::vector<SampleRecord>& records, double eval_fraction,
    std::uint64_t seed) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
    throw ConfigError("stratified_split: eval_fraction must be in (0, 1)");
  }
  // Group per class, then per event (first-appearance order).
  std::map<std::string, std::vector<detail::EventGroup>> by_class;
  std::map<std::string, std::map<std::string, std::size_t>> event_index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    auto& groups = by_class[r.species];
    if (r.capture_event.empty()) {
      groups.push_back({"", {i}});
      continue;
    }
    auto& idx = event_index[r.species];
    auto [pos, inserted] = idx.emplace(r.capture_event, groups.size());
    if (inserted) groups.push_back({r.capture_event, {}});
    groups[pos->second].record_indices.push_back(i);
  }

  std::map<std::string, Split> out;
  for (auto& [cls, groups] : by_class) {
    if (groups.size() < 2) {
      throw DataError("stratified_split: class '" + cls +
                      "' has a single capture event; cannot fill both "
                      "splits");
    }
    int total = 0;
    for (const auto& g : groups) {
      total += static_cast<int>(g.record_indices.size());
    }
    int target = static_cast<int>(std::lround(eval_fraction * total));
    target = std::clamp(target, 1, total - 1);

    Rng rng(sub_seed(seed, "split." + cls));
    int deviation = 0;
    auto eval_indices =
        detail::take_events(groups, target, rng, deviation);
    std::set<std::size_t> eval_set(eval_indices.begin(), eval_indices.end());
    for (const auto& g : groups) {
      for (std::size_t i : g.record_indices) {
        out[records[i].id] =
            eval_set.count(i) ? Split::Eval : Split::Train;
      }
    }
  }
  return out;
}

}  // namespace serval::data
