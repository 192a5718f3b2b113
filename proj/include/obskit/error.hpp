#pragma once

#include <stdexcept>
#include <string>

namespace obskit {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: malformed files, out-of-range parameters, violated preconditions.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A computation that cannot produce a meaningful number (singular systems,
// separation in a likelihood fit, degenerate distributions).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace obskit
