#pragma once

#include <stdexcept>
#include <string>

namespace fpcnet {

// Error classes map onto the CLI exit codes: usage 1, data 2, numerical 3.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

// Malformed or unreadable input data (images, manifests, checkpoints).
struct DataError : Error {
  using Error::Error;
};

// Checkpoint header problems: bad magic, unsupported version, truncation.
struct FormatError : DataError {
  using DataError::DataError;
};

struct NumericalError : Error {
  using Error::Error;
};

}  // namespace fpcnet
