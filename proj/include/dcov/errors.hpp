#pragma once

#include <stdexcept>
#include <string>

namespace dcov {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite or otherwise unusable parameter values.
class InvalidParameter : public Error {
 public:
  using Error::Error;
};

/// Inputs outside the domain of an operation (coordinates, depths, probabilities).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Unsupported or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Factorization failures and other floating-point breakdowns.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Point at or behind the camera.
class CheiralityError : public Error {
 public:
  using Error::Error;
};

/// Not enough valid constraints to form a problem.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries the byte offset where parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  explicit FormatError(const std::string& what) : Error(what), offset_(0) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace dcov
