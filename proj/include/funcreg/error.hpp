#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace funcreg {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Argument lies outside the mathematical domain of the op (e.g. a row that
/// is not a probability distribution).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Operation called in the wrong lifecycle state (missing snapshot, empty
/// dataset, uninitialised EMA shadow).
class StateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. Carries a location: a byte offset for binary and
/// JSON payloads or a 1-based line number for CSV.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t location)
      : Error(what), location_(location) {}

  std::size_t location() const noexcept { return location_; }

 private:
  std::size_t location_;
};

/// Value read from a file is well-formed but out of range.
class RangeError : public Error {
 public:
  using Error::Error;
};

}  // namespace funcreg
