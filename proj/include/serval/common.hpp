// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace serval {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Dataset or manifest problem: missing records, quota shortfall,
/// unreadable image (CLI exit code 3).
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

/// Incompatible artifacts, e.g. checkpoint class count vs manifest
/// class count (CLI exit code 4).
class CompatError : public Error {
 public:
  explicit CompatError(const std::string& msg) : Error(msg) {}
};

/// Numerical verification failure (CLI exit code 5).
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// Shape or dimension mismatch in a tensor operation.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// File I/O failure, corrupt or truncated file.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace serval
