#pragma once

#include <stdexcept>
#include <string>

namespace ssmtl {

// Root of every error raised by the pipeline. The CLI maps the subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing directories, bad presets, inconsistent hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data violates a documented invariant (shape mismatch, bad lengths, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// An operation was called before its precondition holds.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Optional auxiliary data (detections, flow, teacher outputs) is absent; callers may fall back.
class AuxMissingError : public Error {
 public:
  using Error::Error;
};

// ROC AUC requested on labels that contain a single class.
class UndefinedAucError : public Error {
 public:
  using Error::Error;
};

// Training produced a NaN or infinite loss.
class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssmtl
