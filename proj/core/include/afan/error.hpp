#pragma once

#include <stdexcept>
#include <string>

namespace afan {

// Error taxonomy. The CLI maps these onto exit codes:
// usage/config/contract violations -> 1, data/parse errors -> 2,
// numeric failures (non-finite values) -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape conformance failure; message names both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Precondition or contract violation (bad argument, invalid config field).
class DomainError : public Error {
 public:
  using Error::Error;
};

// File or stream could not be read/parsed; message carries line/offset.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite value where a finite one is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace afan
