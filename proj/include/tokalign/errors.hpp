#pragma once

#include <stdexcept>
#include <string>

namespace tokalign {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid model / adaptation configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Missing, empty or inconsistent data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Artifacts that were produced for different models.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

}  // namespace tokalign
