#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace engage {

enum class ErrorCode {
  kInvalidArgument,
  kIo,
  kValidation,
  kNoSamples,
  kDomain,
  kSingularDesign,
  kInsufficientTail,
  kDegenerateLikelihood,
  kDegenerateLabels,
  kInsufficientData,
  kDiverged,
  kCorruptFile,
  kVersionMismatch,
  kBudgetMismatch,
  kTimeout,
  kConnectionRefused,
  kBadStatus,
  kMalformedResponse,
  kScoreOutOfRange,
  kEmptyCandidates,
  kScorerFailed,
  kGeneratorFailed,
  kConfig,
  kCalibrationFailed,
};

// Stable machine-readable identifier, used in CLI and HTTP error bodies.
std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace engage
