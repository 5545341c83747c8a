#pragma once

#include <stdexcept>
#include <string>

namespace textsep {

// Error taxonomy shared by the library and the CLI. The CLI maps DataError
// (and its subtypes) to exit code 3 and NumericError to exit code 4; usage
// errors are handled by the argument parser itself.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Input data is malformed, inconsistent or missing.
struct DataError : Error {
  using Error::Error;
};

// Filesystem-level failure: missing file, unreadable or unwritable path.
struct FileError : DataError {
  using DataError::DataError;
};

// A file exists but its contents are not in a supported format.
struct FormatError : DataError {
  using DataError::DataError;
};

// A configuration value is out of range or internally inconsistent.
struct ConfigError : DataError {
  using DataError::DataError;
};

// Tensor or signal shape contract violated by a caller.
struct ShapeError : Error {
  using Error::Error;
};

// Numeric breakdown: NaN/Inf where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace textsep
