#pragma once

#include <stdexcept>
#include <string>

namespace atelier {

// Base of every error the library raises. The CLI maps subclasses onto exit
// codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than the model or prompt budget allows.
class LengthError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed or mismatched file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf during training or a statistic that is undefined for the input.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace atelier
