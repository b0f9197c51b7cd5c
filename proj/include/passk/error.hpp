#pragma once

#include <stdexcept>
#include <string>

namespace passk {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An argument lies outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Inputs are structurally inconsistent (sizes, ids, dimensions).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or invalid serialized input.
class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw DomainError(what);
}

}  // namespace detail
}  // namespace passk
