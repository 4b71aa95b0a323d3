#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace geofaith {

enum class ErrorCode {
  // trace_store
  MissingManifest,
  CorruptBinary,
  DimensionMismatch,
  IoFailure,
  // spectral_dimension
  TooFewSamples,
  RankTooLarge,
  DegenerateCloud,
  // latent_vae
  NonFiniteLoss,
  NonFiniteGradient,
  EmptyData,
  InvalidConfig,
  // manifold_geometry
  NonFiniteJacobian,
  TooFewPoints,
  Disconnected,
  CoincidentPoints,
  NonPositiveVariance,
  SingleStepTrajectory,
  // entropy_dynamics
  InvalidDistribution,
  EntropyUnavailable,
  // faithfulness_pipeline
  OutOfRange,
  UntrainedDetector,
  DetectorFailure,
  // reward_engine
  MissingAnswer,
  EmptySteps,
  GroupTooSmall,
  MissingLogProb,
  UntrainedEnsemble,
  // cli
  Usage,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingManifest: return "MissingManifest";
    case ErrorCode::CorruptBinary: return "CorruptBinary";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::RankTooLarge: return "RankTooLarge";
    case ErrorCode::DegenerateCloud: return "DegenerateCloud";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::EmptyData: return "EmptyData";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NonFiniteJacobian: return "NonFiniteJacobian";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::Disconnected: return "Disconnected";
    case ErrorCode::CoincidentPoints: return "CoincidentPoints";
    case ErrorCode::NonPositiveVariance: return "NonPositiveVariance";
    case ErrorCode::SingleStepTrajectory: return "SingleStepTrajectory";
    case ErrorCode::InvalidDistribution: return "InvalidDistribution";
    case ErrorCode::EntropyUnavailable: return "EntropyUnavailable";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::UntrainedDetector: return "UntrainedDetector";
    case ErrorCode::DetectorFailure: return "DetectorFailure";
    case ErrorCode::MissingAnswer: return "MissingAnswer";
    case ErrorCode::EmptySteps: return "EmptySteps";
    case ErrorCode::GroupTooSmall: return "GroupTooSmall";
    case ErrorCode::MissingLogProb: return "MissingLogProb";
    case ErrorCode::UntrainedEnsemble: return "UntrainedEnsemble";
    case ErrorCode::Usage: return "Usage";
  }
  return "Unknown";
}

/// Base exception for every failure raised by the library. The code is the
/// stable, machine-checkable part; the message carries context.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), message_(message) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& message() const noexcept { return message_; }

  /// Usage and filesystem problems, as opposed to failures of the analysis itself.
  bool is_usage_or_io() const noexcept {
    return code_ == ErrorCode::Usage || code_ == ErrorCode::IoFailure ||
           code_ == ErrorCode::MissingManifest || code_ == ErrorCode::CorruptBinary;
  }

 private:
  ErrorCode code_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace geofaith
