#pragma once

#include <stdexcept>
#include <string>

namespace gisp {

// Base for everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller handed us something malformed: shapes, ids, configs, files.
class UsageError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public UsageError {
 public:
  using UsageError::UsageError;
};

// Non-finite values, divergence, degenerate statistics.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A pruning constraint (floor rule, protection, quota) cannot be satisfied.
class ConstraintError : public Error {
 public:
  using Error::Error;
};

}  // namespace gisp
