#pragma once

#include <stdexcept>
#include <string>

namespace depthdiff {

/// Base of every error raised by the library. Each subtype maps to one CLI exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor or array extents disagree.
struct DimensionError : Error {
  using Error::Error;
};

/// Invalid configuration values or incompatible configs/checkpoints.
struct ConfigError : Error {
  using Error::Error;
};

/// API misuse (wrong call order, missing gradients, bad flags).
struct UsageError : Error {
  using Error::Error;
};

/// Bad input data (nonpositive depth, empty valid mask, unmatched files).
struct DataError : Error {
  using Error::Error;
};

/// Corrupted checkpoint or file payload.
struct IntegrityError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

/// A forward op produced NaN or Inf from finite inputs.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace depthdiff
