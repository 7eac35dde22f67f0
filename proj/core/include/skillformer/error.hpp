#pragma once

#include <stdexcept>
#include <string>

namespace skillformer {

/// Base of every error thrown by the library. The CLI maps each subclass to
/// its own exit code, so pick the most specific one.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad preset, out-of-range hyperparameter, unknown
/// config key, geometry mismatch between checkpoint and dataset.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent data: bad file header, invalid label, frame too
/// small to crop, pixels outside the expected range.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition (non-scalar loss, empty view set, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes do not line up for the requested operation.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

}  // namespace skillformer
