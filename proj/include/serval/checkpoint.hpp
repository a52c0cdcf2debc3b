// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "serval/common.hpp"
#include "serval/nets.hpp"
#include "serval/rng.hpp"
#include "serval/tensor.hpp"

namespace serval::nn {

// Checkpoint layout, all integers little-endian:
//   magic "CTDC" | version u32 | spec json (u32 len + bytes)
//   | config echo json (u32 len + bytes) | entry count u32 | entries
//   | fnv1a-64 checksum over everything before it
// Entry: kind u8 | name u16 len + bytes | dtype u8 | rank u8
//        | dims u32 x rank | payload
// Kinds: 0 parameter, 1 running mean, 2 running variance, 3 velocity.
// Running statistics are only present for initialized batch-norm states,
// so presence doubles as the initialized flag.

inline constexpr char kCheckpointMagic[4] = {'C', 'T', 'D', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "checkpoint supports float and double tensors");
  return std::is_same_v<T, float> ? 0 : 1;
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes_.push_back((v >> (8 * i)) & 0xff);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back((v >> (8 * i)) & 0xff);
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back((v >> (8 * i)) & 0xff);
  }
  void str(const std::string& s) {
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  template <typename T>
  void raw(const T* data, std::size_t count) {
    // Little-endian host assumed; element bytes are emitted in memory
    // order.
    const auto* p = reinterpret_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + count * sizeof(T));
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> bytes, std::string path)
      : bytes_(std::move(bytes)), path_(std::move(path)),
        limit_(bytes_.size()) {}

  std::size_t offset() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }
  std::size_t limit() const { return limit_; }
  void set_limit(std::size_t limit) { limit_ = limit; }

  void need(std::size_t n) {
    if (pos_ + n > limit_) {
      throw CompatError("checkpoint '" + path_ + "': truncated at offset " +
                        std::to_string(pos_) + " (need " + std::to_string(n) +
                        " more bytes)");
    }
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= std::uint16_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  template <typename T>
  std::vector<T> raw(std::size_t count) {
    need(count * sizeof(T));
    std::vector<T> out(count);
    std::memcpy(out.data(), bytes_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
    return out;
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  const std::string& path() const { return path_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::string path_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a64_bytes(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline nlohmann::json spec_to_json(const ArchitectureSpec& s) {
  return {{"family", family_to_string(s.family)},
          {"depth_units", s.depth_units},
          {"input_side", s.input_side},
          {"input_channels", s.input_channels},
          {"num_classes", s.num_classes},
          {"dropout_p", s.dropout_p},
          {"width_base", s.width_base}};
}

inline ArchitectureSpec spec_from_json(const nlohmann::json& j) {
  ArchitectureSpec s;
  s.family = family_from_string(j.at("family").get<std::string>());
  s.depth_units = j.at("depth_units").get<int>();
  s.input_side = j.at("input_side").get<int>();
  s.input_channels = j.at("input_channels").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.dropout_p = j.at("dropout_p").get<double>();
  s.width_base = j.at("width_base").get<int>();
  return s;
}

}  // namespace detail

template <typename T>
struct Checkpoint {
  ModelState<T> model;
  std::string config_echo;  // json text, free-form
  std::map<std::string, std::vector<T>> velocities;
};

template <typename T>
void save_checkpoint(const ModelState<T>& model, const std::string& path,
                     const std::string& config_echo = "{}",
                     const std::map<std::string, std::vector<T>>* velocities =
                         nullptr) {
  detail::ByteWriter w;
  w.str(std::string(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  std::string spec_json = detail::spec_to_json(model.spec).dump();
  w.u32(static_cast<std::uint32_t>(spec_json.size()));
  w.str(spec_json);
  w.u32(static_cast<std::uint32_t>(config_echo.size()));
  w.str(config_echo);

  std::uint32_t entries = static_cast<std::uint32_t>(model.params.size());
  for (const auto& [prefix, state] : model.bn) {
    (void)prefix;
    if (state.initialized) entries += 2;
  }
  if (velocities) entries += static_cast<std::uint32_t>(velocities->size());
  w.u32(entries);

  auto entry = [&](std::uint8_t kind, const std::string& name,
                   const std::vector<int>& dims, const T* data,
                   std::size_t count) {
    w.u8(kind);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
    w.u8(detail::dtype_code<T>());
    w.u8(static_cast<std::uint8_t>(dims.size()));
    for (int d : dims) w.u32(static_cast<std::uint32_t>(d));
    w.raw(data, count);
  };

  for (const auto& p : model.params.items()) {
    entry(0, p.name, p.tensor.shape(), p.tensor.data().data(),
          static_cast<std::size_t>(p.tensor.size()));
  }
  for (const auto& [prefix, state] : model.bn) {
    if (!state.initialized) continue;
    entry(1, prefix, {static_cast<int>(state.running_mean.size())},
          state.running_mean.data(), state.running_mean.size());
    entry(2, prefix, {static_cast<int>(state.running_var.size())},
          state.running_var.data(), state.running_var.size());
  }
  if (velocities) {
    for (const auto& [name, v] : *velocities) {
      entry(3, name, {static_cast<int>(v.size())}, v.data(), v.size());
    }
  }

  std::uint64_t checksum =
      detail::fnv1a64_bytes(w.bytes().data(), w.bytes().size());
  w.u64(checksum);

  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("save_checkpoint: cannot open '" + path + "' for writing");
  }
  out.write(reinterpret_cast<const char*>(w.bytes().data()),
            static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw IoError("save_checkpoint: short write to '" + path + "'");
}

template <typename T = float>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes(
      (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::ByteReader r(std::move(bytes), path);

  if (r.size() < 20) {
    throw CompatError("checkpoint '" + path + "': truncated at offset 0 (" +
                      std::to_string(r.size()) + " bytes total)");
  }
  // The final 8 bytes are the checksum; content reads must stop short of
  // them so a cut-off file reports the offset where data ran out.
  r.set_limit(r.size() - 8);
  std::string magic = r.str(4);
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
    throw CompatError("checkpoint '" + path + "': bad magic, not a "
                      "checkpoint file");
  }
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CompatError("checkpoint '" + path + "': unsupported version " +
                      std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }

  Checkpoint<T> out;
  auto spec_json = r.str(r.u32());
  try {
    out.model = build_architecture<T>(
        detail::spec_from_json(nlohmann::json::parse(spec_json)), 0);
  } catch (const nlohmann::json::exception& e) {
    throw CompatError("checkpoint '" + path + "': malformed spec block: " +
                      e.what());
  }
  out.config_echo = r.str(r.u32());

  std::uint32_t entries = r.u32();
  for (std::uint32_t i = 0; i < entries; ++i) {
    std::size_t entry_offset = r.offset();
    std::uint8_t kind = r.u8();
    std::string name = r.str(r.u16());
    std::uint8_t dtype = r.u8();
    if (dtype != detail::dtype_code<T>()) {
      throw CompatError("checkpoint '" + path + "': entry '" + name +
                        "' at offset " + std::to_string(entry_offset) +
                        " has dtype code " + std::to_string(dtype) +
                        ", expected " +
                        std::to_string(detail::dtype_code<T>()));
    }
    std::uint8_t rank = r.u8();
    Shape dims;
    std::size_t count = 1;
    for (int d = 0; d < rank; ++d) {
      dims.push_back(static_cast<int>(r.u32()));
      count *= static_cast<std::size_t>(dims.back());
    }
    auto values = r.template raw<T>(count);

    switch (kind) {
      case 0: {
        if (!out.model.params.contains(name)) {
          throw CompatError("checkpoint '" + path + "': parameter '" + name +
                            "' does not exist in this architecture");
        }
        auto& p = out.model.params.at(name);
        if (p.tensor.shape() != dims) {
          throw CompatError("checkpoint '" + path + "': parameter '" + name +
                            "' shape " + shape_str(dims) +
                            " does not match the architecture's " +
                            shape_str(p.tensor.shape()));
        }
        std::copy(values.begin(), values.end(), p.tensor.data().begin());
        break;
      }
      case 1:
      case 2: {
        auto it = out.model.bn.find(name);
        if (it == out.model.bn.end()) {
          throw CompatError("checkpoint '" + path +
                            "': running statistics for unknown layer '" +
                            name + "'");
        }
        auto& target =
            kind == 1 ? it->second.running_mean : it->second.running_var;
        if (values.size() != target.size()) {
          throw CompatError("checkpoint '" + path + "': running statistics "
                            "for '" + name + "' have wrong width");
        }
        target = std::move(values);
        it->second.initialized = true;
        break;
      }
      case 3:
        out.velocities[name] = std::move(values);
        break;
      default:
        throw CompatError("checkpoint '" + path + "': unknown entry kind " +
                          std::to_string(kind) + " at offset " +
                          std::to_string(entry_offset));
    }
  }

  if (r.offset() != r.limit()) {
    throw CompatError("checkpoint '" + path + "': " +
                      std::to_string(r.limit() - r.offset()) +
                      " unexpected trailing bytes at offset " +
                      std::to_string(r.offset()));
  }
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) {
    stored |= std::uint64_t(r.bytes()[r.limit() + i]) << (8 * i);
  }
  std::uint64_t actual = detail::fnv1a64_bytes(r.bytes().data(), r.limit());
  if (stored != actual) {
    throw CompatError("checkpoint '" + path + "': checksum mismatch, file "
                      "is corrupt");
  }
  return out;
}

}  // namespace serval::nn
