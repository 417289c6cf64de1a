#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedidx {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension contract violated.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside an operation's domain (zero-norm vector, empty batch, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A loss or parameter became NaN/inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class UnsupportedPrimitive : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed binary or CSV input. `offset` is a byte offset for binary
// files and a line number for text files.
class FormatError : public Error {
 public:
  // `unit` names what the position counts: byte offset or text line.
  FormatError(const std::string& what, std::size_t offset, const char* unit = "offset")
      : Error(what + " (at " + unit + " " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace fedidx
