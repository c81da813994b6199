#pragma once

#include <stdexcept>
#include <string>

namespace penwise {

/// Base of every error raised by the library. The CLI maps ValidationError
/// subclasses to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
  public:
    using Error::Error;
};

class InvalidArgument : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

/// Sequence does not fit the model's maximum length.
class LengthError : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

/// Zero-norm vector where a direction is required (cosine, normalisation).
class DegenerateInput : public Error {
  public:
    using Error::Error;
};

class NumericFailure : public Error {
  public:
    using Error::Error;
};

class LookupError : public Error {
  public:
    using Error::Error;
};

class ParseError : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

class IoError : public Error {
  public:
    using Error::Error;
};

class FormatError : public Error {
  public:
    using Error::Error;
};

class ChecksumError : public FormatError {
  public:
    using FormatError::FormatError;
};

class TransportError : public Error {
  public:
    using Error::Error;
};

class MalformedOutput : public Error {
  public:
    using Error::Error;
};

}  // namespace penwise
