#pragma once

#include <stdexcept>
#include <string>

namespace f2p {

// Base for all runtime failures raised by the library. The CLI maps this to
// exit code 3.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Input or invariant rejected (fingerprint drift, bad layout, bad index).
// The CLI maps this to exit code 2.
class ValidationError : public Error {
public:
  using Error::Error;
};

class EncodingError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

class IoError : public Error {
public:
  using Error::Error;
};

class TrainingError : public Error {
public:
  using Error::Error;
};

} // namespace f2p
