#pragma once

#include <stdexcept>
#include <string>

namespace attnmvs {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Image or volume extents that violate a divisibility requirement.
class SizeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DegenerateGeometry : public Error {
 public:
  using Error::Error;
};

class InsufficientViews : public Error {
 public:
  using Error::Error;
};

/// Non-finite values observed in checked mode.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// backward() issued twice on the same tape without a reset.
class AccumulationError : public Error {
 public:
  using Error::Error;
};

class DegenerateLoss : public Error {
 public:
  using Error::Error;
};

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& source, int line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  int line() const noexcept { return line_; }

 private:
  int line_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace attnmvs
