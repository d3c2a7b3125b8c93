#include "gmptl/error.hpp"

namespace gmptl {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedManifest: return "MalformedManifest";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::EmptySignal: return "EmptySignal";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::TapOutOfRange: return "TapOutOfRange";
    case ErrorCode::MaskIndexOutOfRange: return "MaskIndexOutOfRange";
    case ErrorCode::InvalidProbability: return "InvalidProbability";
    case ErrorCode::IncompatibleConfig: return "IncompatibleConfig";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::EmptySequence: return "EmptySequence";
    case ErrorCode::NonFiniteLogits: return "NonFiniteLogits";
    case ErrorCode::MissingGenderLabel: return "MissingGenderLabel";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::RangeViolation: return "RangeViolation";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingGMP: return "MissingGMP";
    case ErrorCode::FrameCountMismatch: return "FrameCountMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::NonFiniteCosine: return "NonFiniteCosine";
    case ErrorCode::EmptyMatrix: return "EmptyMatrix";
    case ErrorCode::WrongSessionCount: return "WrongSessionCount";
    case ErrorCode::SpeakerLeak: return "SpeakerLeak";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::ProvenanceMismatch: return "ProvenanceMismatch";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigInvalid:
    case ErrorCode::InvalidSpec:
    case ErrorCode::InvalidProbability:
    case ErrorCode::TapOutOfRange:
    case ErrorCode::IncompatibleConfig:
      return 2;
    case ErrorCode::DivergedLoss:
    case ErrorCode::NonFiniteLogits:
    case ErrorCode::NonFiniteCosine:
      return 4;
    default:
      return 3;
  }
}

}  // namespace gmptl
