#pragma once

#include <stdexcept>
#include <string>

namespace steerkit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configuration or argument violated a documented invariant.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Vector or matrix dimensions disagree.
class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// A token sequence is empty or longer than the model context.
class SequenceLengthError : public Error {
 public:
  using Error::Error;
};

}  // namespace steerkit
