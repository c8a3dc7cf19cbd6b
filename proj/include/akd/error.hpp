#pragma once

#include <stdexcept>
#include <string>

namespace akd {

/// Base of all library errors. Runtime failures map to CLI exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed, missing or inconsistent inputs (shapes, files, invariants).
/// The CLI maps these to exit code 2.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Numerical breakdown: non-finite state, singular systems.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace akd
