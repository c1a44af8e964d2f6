#pragma once

#include <stdexcept>
#include <string>

namespace dualenc {

// Base for every error raised by the library. CLI exit codes are derived
// from the concrete type (see exit_code_for).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Out-of-range scalar argument (temperature, k, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Zero-norm vector or coincident points where a direction or distance is needed.
class DegenerateError : public Error {
 public:
  explicit DegenerateError(const std::string& what, long index = -1)
      : Error(what), index_(index) {}
  long index() const { return index_; }

 private:
  long index_;
};

// Empty text, all-zero mask.
class EmptyInputError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or option combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unreadable or malformed input files.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A structural invariant (aliasing, freezing) does not hold.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace dualenc
