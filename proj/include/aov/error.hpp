#pragma once

#include <stdexcept>
#include <string>

namespace aov {

// Error taxonomy shared with the CLI exit codes: usage=1, data=2, numeric=3.
class Error : public std::runtime_error {
 public:
  Error(const std::string& msg, int exit_code)
      : std::runtime_error(msg), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

// Bad command lines, unknown config keys, invalid flag combinations.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(msg, 1) {}
};

// Malformed files, bad manifests, missing/unknown checkpoint tensors.
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg, 2) {}
};

// Incompatible tensor extents. A data error: shapes come from stored inputs.
class ShapeError : public DataError {
 public:
  explicit ShapeError(const std::string& msg) : DataError(msg) {}
};

// NaN/Inf values, degenerate (zero-norm) vectors, zero weight sums.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg, 3) {}
};

}  // namespace aov
