#pragma once

#include <stdexcept>
#include <string>

namespace nowcast {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input data: shape mismatch, non-finite values, negative rain.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Bad numeric parameter (T <= 0, B = 0, sample length too large, ...).
class InvalidParameter : public Error {
 public:
  using Error::Error;
};

class InvalidSpec : public Error {
 public:
  using Error::Error;
};

class EmptyDataset : public Error {
 public:
  using Error::Error;
};

/// Architecture descriptor names an op outside the differentiable op set.
class UnsupportedOp : public Error {
 public:
  using Error::Error;
};

class TrainingFailure : public Error {
 public:
  TrainingFailure(const std::string& what, int epoch)
      : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace nowcast
