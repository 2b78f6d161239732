#pragma once

#include <stdexcept>
#include <string>

namespace lmens {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input bytes do not follow a file grammar (bad magic, malformed header).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input that violates a data invariant (positive logprob,
/// NaN, length mismatch, misaligned streams, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Caller passed arguments outside an operation's domain.
class UsageError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace lmens
