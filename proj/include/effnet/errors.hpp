#pragma once

#include <stdexcept>
#include <string>

namespace effnet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or flag combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse (backward on a non-scalar, empty inputs, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing input data (files, labels, images).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN or Inf from finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace effnet
