#pragma once

#include <stdexcept>
#include <string>

namespace flowgate {

// Error taxonomy. The CLI maps these onto process exit codes:
// usage -> 2, data -> 3, numeric -> 4.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class UsageError : public Error {
 public:
  using Error::Error;
};

// Bad inputs: files, manifests, shapes, ranges, checkpoints.
class DataError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public DataError {
 public:
  using DataError::DataError;
};

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

class EvaluationError : public DataError {
 public:
  using DataError::DataError;
};

// Runtime numerics: overflow, NaN, singular kernels, divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

class SingularMatrixError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace flowgate
