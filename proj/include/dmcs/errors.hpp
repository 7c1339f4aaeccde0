#pragma once

#include <stdexcept>
#include <string>

namespace dmcs {

// Error hierarchy. The CLI maps these to exit codes (usage 1, data 2, numeric 3).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct ShapeError : DataError {
  using DataError::DataError;
};

struct NumericError : Error {
  using Error::Error;
};

}  // namespace dmcs
