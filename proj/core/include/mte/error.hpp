// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mte {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition violated by the caller (bad argument, bad spec, bad range).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Operand shapes do not conform for an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value that must be finite was NaN or infinite.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file (CSV, JSON checkpoint, config).
class ParseError : public Error {
 public:
  using Error::Error;
};

}  // namespace mte
