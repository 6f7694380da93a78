#pragma once

#include <stdexcept>
#include <string>

namespace s2fpn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible or invalid tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid layer / model / run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Object used in a state that does not allow the call (e.g. BN eval with no stats).
class StateError : public Error {
 public:
  using Error::Error;
};

/// API misuse, such as calling backward on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// File system or format problems.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint content that cannot be applied to a model.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Gradient or finiteness check failures.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace s2fpn
