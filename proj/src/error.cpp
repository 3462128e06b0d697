#include "engage/error.hpp"

namespace engage {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kValidation: return "validation_error";
    case ErrorCode::kNoSamples: return "no_samples";
    case ErrorCode::kDomain: return "domain_error";
    case ErrorCode::kSingularDesign: return "singular_design";
    case ErrorCode::kInsufficientTail: return "insufficient_tail";
    case ErrorCode::kDegenerateLikelihood: return "degenerate_likelihood";
    case ErrorCode::kDegenerateLabels: return "degenerate_labels";
    case ErrorCode::kInsufficientData: return "insufficient_data";
    case ErrorCode::kDiverged: return "diverged";
    case ErrorCode::kCorruptFile: return "corrupt_file";
    case ErrorCode::kVersionMismatch: return "version_mismatch";
    case ErrorCode::kBudgetMismatch: return "budget_mismatch";
    case ErrorCode::kTimeout: return "timeout";
    case ErrorCode::kConnectionRefused: return "connection_refused";
    case ErrorCode::kBadStatus: return "bad_status";
    case ErrorCode::kMalformedResponse: return "malformed_response";
    case ErrorCode::kScoreOutOfRange: return "score_out_of_range";
    case ErrorCode::kEmptyCandidates: return "empty_candidates";
    case ErrorCode::kScorerFailed: return "scorer_failed";
    case ErrorCode::kGeneratorFailed: return "generator_failed";
    case ErrorCode::kConfig: return "config_error";
    case ErrorCode::kCalibrationFailed: return "calibration_failed";
  }
  return "unknown";
}

}  // namespace engage
