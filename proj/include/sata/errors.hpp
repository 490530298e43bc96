#pragma once

#include <stdexcept>
#include <string>

namespace sata {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN or otherwise unusable numeric input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A row whose norm is too small to normalize.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition (non-scalar loss, unzeroed
/// gradients, non-probability rows, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Batch statistics need at least two samples.
class BatchTooSmallError : public Error {
 public:
  using Error::Error;
};

class MissingClassError : public Error {
 public:
  using Error::Error;
};

class EmptyPositiveSetError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, schedule or file content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Synthetic data generation could not satisfy its guarantees.
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace sata
