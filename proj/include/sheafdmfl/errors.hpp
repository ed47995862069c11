#pragma once

#include <stdexcept>
#include <string>

namespace sheafdmfl {

/// Root of the error hierarchy. ConfigError maps to CLI exit code 2,
/// NumericError to exit code 3; anything else is an internal failure.
struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : SimError {
  using SimError::SimError;
};

struct NumericError : SimError {
  using SimError::SimError;
};

struct InvalidEdgeError : ConfigError {
  using ConfigError::ConfigError;
};

struct EmptyModalitySetError : ConfigError {
  using ConfigError::ConfigError;
};

struct DisconnectedSubgraphError : ConfigError {
  using ConfigError::ConfigError;
};

struct InvalidGammaError : ConfigError {
  using ConfigError::ConfigError;
};

struct InvalidSigmaError : ConfigError {
  using ConfigError::ConfigError;
};

struct InvalidFractionError : ConfigError {
  using ConfigError::ConfigError;
};

struct ModalityAbsentError : ConfigError {
  using ConfigError::ConfigError;
};

struct EmptyBatchError : ConfigError {
  using ConfigError::ConfigError;
};

struct LabelOutOfRangeError : ConfigError {
  using ConfigError::ConfigError;
};

struct DimensionMismatchError : SimError {
  using SimError::SimError;
};

struct NonFiniteError : NumericError {
  using NumericError::NumericError;
};

struct NonConvergentError : NumericError {
  using NumericError::NumericError;
};

}  // namespace sheafdmfl
