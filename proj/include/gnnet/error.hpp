#pragma once

#include <stdexcept>
#include <string>

namespace gnnet {

/// Base class of every fault raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation. Always a programming error.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value outside an operation's mathematical domain (singular matrix,
/// sample outside a map, log of a non-positive number).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Rejected configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf losses and similar numerical breakdowns.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Faults reading or writing files. Subclasses tell corruption modes apart.
class DataError : public Error {
 public:
  using Error::Error;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedError : public DataError {
 public:
  using DataError::DataError;
};

class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace gnnet
