#pragma once

#include <stdexcept>
#include <string>

namespace cfair {

// Every failure the library reports derives from Error. The CLI maps each
// subclass to its own exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad shapes, counts or ranges passed by the caller.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or config documents.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed input files: missing columns, degenerate sensitive attribute, bad checkpoints.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or an MMD estimate below the cancellation floor.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Structural model problems, e.g. a singular W_U W_U^T.
class ModelError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class ComparisonError : public Error {
 public:
  using Error::Error;
};

// A trade-off line cannot be fitted (fewer than two distinct E values).
class DegenerateFitError : public ComparisonError {
 public:
  using ComparisonError::ComparisonError;
};

enum ExitCode : int {
  kExitOk = 0,
  kExitUnknown = 1,
  kExitArgument = 2,
  kExitIo = 3,
  kExitSchema = 4,
  kExitTraining = 5,
  kExitModel = 6,
  kExitVerify = 7,
};

inline int exit_code(const Error& e) noexcept {
  if (dynamic_cast<const ArgumentError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
      dynamic_cast<const ComparisonError*>(&e))
    return kExitArgument;
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const SchemaError*>(&e)) return kExitSchema;
  if (dynamic_cast<const TrainingError*>(&e) || dynamic_cast<const NumericalError*>(&e))
    return kExitTraining;
  if (dynamic_cast<const ModelError*>(&e)) return kExitModel;
  return kExitUnknown;
}

}  // namespace cfair
