#pragma once

#include <stdexcept>
#include <string>

namespace hlguide {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition of an operation was violated by the caller (dimension
/// mismatch, out-of-range parameter, misaligned mask).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Invalid or incomplete configuration (missing verdict tokens, bad template).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data failed validation (duplicate ids, invalid spans).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

/// Operation not allowed in the current state of the target object.
class Conflict : public Error {
 public:
  using Error::Error;
};

/// A metric is mathematically undefined for the given input (e.g. AUC over a
/// single class).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

/// Transport-level failure talking to an external service; safe to retry.
class RetriableError : public Error {
 public:
  using Error::Error;
};

/// The external service replied, but the reply could not be interpreted.
class ParseError : public Error {
 public:
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace hlguide
