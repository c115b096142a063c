// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace silq {

/// Base class for all toolkit errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor shape / dimension mismatch.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Invalid argument value or malformed configuration.
struct InputError : Error {
  explicit InputError(const std::string& msg) : Error(msg) {}
};

/// API misuse (e.g. backward on a non-scalar loss).
struct UsageError : Error {
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

/// Fixed-capacity container overflow (e.g. KV cache past max length).
struct CapacityError : Error {
  explicit CapacityError(const std::string& msg) : Error(msg) {}
};

/// File read/write failure; message carries the path.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

/// Training produced a non-finite loss.
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

/// Integer export failed its forward-equivalence check.
struct ExportParityError : Error {
  explicit ExportParityError(const std::string& msg) : Error(msg) {}
};

inline void check_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline void check_input(bool cond, const std::string& msg) {
  if (!cond) throw InputError(msg);
}

inline void check_usage(bool cond, const std::string& msg) {
  if (!cond) throw UsageError(msg);
}

}  // namespace silq
