#pragma once

#include <stdexcept>
#include <string>

namespace dir3d {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that cannot be combined (shape mismatch, kernel larger than input, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A precondition on an argument was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (missing landmarks, short videos, bad manifests).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A ModelConfig that cannot produce a valid network.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A binary file that does not follow the expected layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint written for a different configuration than the one being resumed.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace dir3d
