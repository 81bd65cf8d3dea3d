#pragma once

#include <stdexcept>
#include <string>

namespace simcmf {

// Base of every exception the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration, arguments or input data (CLI exit code 3).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Tensor shape contract violated by a caller.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Checkpoint / archive / image file could not be read.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Training aborted, e.g. on a non-finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace simcmf
