#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gmptl {

enum class ErrorCode {
  // corpus
  MalformedManifest,
  DuplicateId,
  UnknownLabel,
  InvalidSpec,
  EmptySignal,
  NonFiniteInput,
  // encoder
  TapOutOfRange,
  MaskIndexOutOfRange,
  InvalidProbability,
  IncompatibleConfig,
  CorruptCheckpoint,
  // stage 1
  EmptySequence,
  NonFiniteLogits,
  MissingGenderLabel,
  DivergedLoss,
  // gmp
  TooFewPoints,
  CorruptFile,
  RangeViolation,
  EmptyInput,
  // stage 2
  EmptyMask,
  ShapeMismatch,
  MissingGMP,
  FrameCountMismatch,
  // stage 3
  ZeroVector,
  NonFiniteCosine,
  // eval
  EmptyMatrix,
  WrongSessionCount,
  SpeakerLeak,
  // cli
  ConfigInvalid,
  ProvenanceMismatch,
  Io,
};

std::string_view to_string(ErrorCode code);

/// Exit-code class of an error as seen by the command-line tool:
/// 2 config error, 3 data error, 4 training divergence.
int exit_code_for(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace gmptl
