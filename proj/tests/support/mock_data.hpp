// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "serval/manifest.hpp"

namespace serval::data::testing {

/// The 26-species roster with its native image counts.
inline const std::vector<std::pair<std::string, int>>& species_counts() {
  static const std::vector<std::pair<std::string, int>> table = {
      {"baboon", 4618},          {"buffalo", 34684},
      {"cheetah", 3354},         {"dik-dik", 3364},
      {"eland", 7395},           {"elephant", 25294},
      {"giraffe", 22439},        {"grants-gazelle", 21340},
      {"guinea-fowl", 23023},    {"hartebeest", 15401},
      {"hippopotamus", 3231},    {"human", 26557},
      {"impala", 22281},         {"jackal", 1207},
      {"kori-bustard", 2042},    {"lion-female-cub", 8773},
      {"lion-male", 2413},       {"ostrich", 1945},
      {"reedbuck", 4131},        {"secretary-bird", 1302},
      {"spotted-hyena", 10242},  {"thomsons-gazelle", 116421},
      {"topi", 6247},            {"warthog", 22041},
      {"wildebeest", 212973},    {"zebra", 181043},
  };
  return table;
}

/// A metadata-only manifest (no image files) with the full native
/// per-class counts. Bursts cycle sizes 1, 2, 3; roughly one sixth of
/// the events land in eval.
inline Manifest native_counts_mock() {
  Manifest m;
  for (const auto& [cls, count] : species_counts()) {
    m.class_table.push_back(cls);
  }
  m.provenance = "metadata mock of the native class distribution";
  int event_serial = 0;
  for (const auto& [cls, count] : species_counts()) {
    int emitted = 0;
    int burst_cycle = 0;
    while (emitted < count) {
      int burst = burst_cycle % 3 + 1;
      if (burst > count - emitted) burst = count - emitted;
      ++burst_cycle;
      std::string event = "e" + std::to_string(event_serial++);
      Split split = burst_cycle % 6 == 0 ? Split::Eval : Split::Train;
      for (int i = 0; i < burst; ++i) {
        SampleRecord r;
        r.id = event + "-" + std::to_string(i);
        r.uri = r.id + ".ppm";
        r.species = cls;
        r.capture_event = event;
        r.burst_index = i;
        m.splits[r.id] = split;
        m.records.push_back(std::move(r));
        ++emitted;
      }
    }
  }
  return m;
}

/// Small fixture: `classes` species, `train_n`/`eval_n` records each,
/// bursts cycling sizes 1, 2, 3. Either flag plants per-record features
/// on a deterministic third of the records.
inline Manifest small_mock(int classes, int train_n, int eval_n,
                           bool with_foreground_mix = false,
                           bool with_crop_mix = false) {
  Manifest m;
  for (int k = 0; k < classes; ++k) {
    m.class_table.push_back("cls" + std::to_string(k));
  }
  m.provenance = "small metadata mock";
  int event_serial = 0;
  for (int k = 0; k < classes; ++k) {
    for (int pass = 0; pass < 2; ++pass) {
      Split split = pass == 0 ? Split::Train : Split::Eval;
      int want = pass == 0 ? train_n : eval_n;
      int emitted = 0;
      int burst_cycle = 0;
      while (emitted < want) {
        int burst = burst_cycle % 3 + 1;
        if (burst > want - emitted) burst = want - emitted;
        ++burst_cycle;
        std::string event = "e" + std::to_string(event_serial++);
        for (int i = 0; i < burst; ++i) {
          SampleRecord r;
          r.id = event + "-" + std::to_string(i);
          r.uri = r.id + ".ppm";
          r.species = m.class_table[static_cast<std::size_t>(k)];
          r.capture_event = event;
          r.burst_index = i;
          int serial = event_serial * 10 + i;
          if (with_foreground_mix) r.foreground = serial % 3 != 0;
          if (with_crop_mix && serial % 3 != 1) {
            r.crop_box = CropBox{0, 0, 4, 4};
          }
          m.splits[r.id] = split;
          m.records.push_back(std::move(r));
          ++emitted;
        }
      }
    }
  }
  return m;
}

}  // namespace serval::data::testing
