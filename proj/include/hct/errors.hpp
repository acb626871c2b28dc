#pragma once

#include <stdexcept>
#include <string>

namespace hct {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible or non-integral tensor/image dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A function argument outside its documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, training or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid numeric data (NaN input, non-binary mask).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent on-disk artifact.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values produced during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace hct
