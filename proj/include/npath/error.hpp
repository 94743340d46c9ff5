#pragma once

#include <stdexcept>
#include <string>

namespace npath {

// Base of every error raised by the library. The CLI maps UsageError-derived
// failures to exit code 1 and everything numeric to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public UsageError {
 public:
  using UsageError::UsageError;
};

class InvalidParameter : public UsageError {
 public:
  using UsageError::UsageError;
};

class IndexError : public UsageError {
 public:
  using UsageError::UsageError;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Raised by the finite-difference harness when f is not finite at a probe.
class OracleFailure : public NumericError {
 public:
  using NumericError::NumericError;
};

class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& what, int epoch) : NumericError(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

// Checkpoint decoding failures. Each variant is distinct so callers can tell a
// foreign file from a damaged one.
class FormatError : public UsageError {
 public:
  using UsageError::UsageError;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  TruncatedError(const std::string& what, std::string tensor)
      : FormatError(what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

}  // namespace npath
