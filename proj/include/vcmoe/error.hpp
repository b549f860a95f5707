#pragma once

#include <stdexcept>
#include <string>

namespace vcmoe {

enum class ErrorCode {
  NonPositiveBandwidth,
  QuadratureFailure,
  DimensionMismatch,
  InvalidResponse,
  InvalidModel,
  NoEffectiveSamples,
  SingularHessian,
  DegenerateIndex,
  OutOfDomain,
  InvalidArgument,
  InsufficientData,
  AllFoldsFailed,
  PilotTooSmall,
  BandwidthGeqOne,
  TooFewReplicates,
  TooManyFailures,
  UnknownCoefficient,
  LengthMismatch,
  ParseError,
  SchemaError,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonPositiveBandwidth: return "NonPositiveBandwidth";
    case ErrorCode::QuadratureFailure: return "QuadratureFailure";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::InvalidResponse: return "InvalidResponse";
    case ErrorCode::InvalidModel: return "InvalidModel";
    case ErrorCode::NoEffectiveSamples: return "NoEffectiveSamples";
    case ErrorCode::SingularHessian: return "SingularHessian";
    case ErrorCode::DegenerateIndex: return "DegenerateIndex";
    case ErrorCode::OutOfDomain: return "OutOfDomain";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::AllFoldsFailed: return "AllFoldsFailed";
    case ErrorCode::PilotTooSmall: return "PilotTooSmall";
    case ErrorCode::BandwidthGeqOne: return "BandwidthGeqOne";
    case ErrorCode::TooFewReplicates: return "TooFewReplicates";
    case ErrorCode::TooManyFailures: return "TooManyFailures";
    case ErrorCode::UnknownCoefficient: return "UnknownCoefficient";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::SchemaError: return "SchemaError";
  }
  return "Unknown";
}

//! Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace vcmoe
