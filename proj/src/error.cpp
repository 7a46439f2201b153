#include "ebench/error.hpp"

namespace ebench {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSchema: return "schema_error";
    case ErrorCode::kRow: return "row_error";
    case ErrorCode::kEmptyInput: return "empty_input";
    case ErrorCode::kData: return "data_error";
    case ErrorCode::kArgument: return "argument_error";
    case ErrorCode::kEmptyPeerGroup: return "empty_peer_group";
    case ErrorCode::kUnderdetermined: return "underdetermined";
    case ErrorCode::kPredictorBudgetExceeded: return "predictor_budget_exceeded";
    case ErrorCode::kConfiguration: return "configuration_error";
    case ErrorCode::kCapacity: return "capacity_exceeded";
    case ErrorCode::kModelFormat: return "model_format_error";
    case ErrorCode::kDomain: return "domain_error";
    case ErrorCode::kCalibration: return "calibration_error";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kInteractionsUnsupported: return "interactions_unsupported";
    case ErrorCode::kRecordMismatch: return "record_schema_mismatch";
    case ErrorCode::kInvalidOverride: return "invalid_override";
    case ErrorCode::kInternal: return "internal_error";
  }
  return "internal_error";
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSchema:
    case ErrorCode::kRow:
    case ErrorCode::kEmptyInput:
    case ErrorCode::kNotFound:
    case ErrorCode::kRecordMismatch:
      return 2;
    case ErrorCode::kEmptyPeerGroup:
      return 3;
    case ErrorCode::kData:
    case ErrorCode::kArgument:
    case ErrorCode::kUnderdetermined:
    case ErrorCode::kPredictorBudgetExceeded:
    case ErrorCode::kConfiguration:
    case ErrorCode::kCapacity:
    case ErrorCode::kModelFormat:
    case ErrorCode::kDomain:
    case ErrorCode::kCalibration:
    case ErrorCode::kInteractionsUnsupported:
    case ErrorCode::kInvalidOverride:
      return 4;
    case ErrorCode::kInternal:
      return 5;
  }
  return 5;
}

int http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSchema:
    case ErrorCode::kRow:
    case ErrorCode::kEmptyInput:
      return 400;
    case ErrorCode::kNotFound:
      return 404;
    case ErrorCode::kInternal:
      return 500;
    default:
      return 422;
  }
}

}  // namespace ebench
