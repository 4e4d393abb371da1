#pragma once

#include <stdexcept>
#include <string>

namespace nvdeer {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Input data is malformed or physically inconsistent.
class InvalidData : public Error {
 public:
  using Error::Error;
};

/// Configuration could not be validated (missing or contradictory fields).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericFailure : public Error {
 public:
  using Error::Error;
};

/// Adaptive integrator could not keep the error under control.
class IntegrationFailure : public NumericFailure {
 public:
  using NumericFailure::NumericFailure;
};

class FitFailure : public NumericFailure {
 public:
  using NumericFailure::NumericFailure;
};

}  // namespace nvdeer
