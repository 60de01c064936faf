#pragma once

#include <stdexcept>
#include <string>

namespace mta {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments; the CLI maps it to a dedicated exit code.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public IoError {
 public:
  using IoError::IoError;
};

/// Archive or file contents do not match the expected layout or version.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace mta
