#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"

namespace ebench {

// Stable machine-readable error codes. The string forms are part of the
// service and CLI interface.
enum class ErrorCode {
  kSchema,
  kRow,
  kEmptyInput,
  kData,
  kArgument,
  kEmptyPeerGroup,
  kUnderdetermined,
  kPredictorBudgetExceeded,
  kConfiguration,
  kCapacity,
  kModelFormat,
  kDomain,
  kCalibration,
  kNotFound,
  kInteractionsUnsupported,
  kRecordMismatch,
  kInvalidOverride,
  kInternal,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        nlohmann::json details = nlohmann::json::object())
      : std::runtime_error(message), code_(code), details_(std::move(details)) {}

  ErrorCode code() const { return code_; }
  const nlohmann::json& details() const { return details_; }

 private:
  ErrorCode code_;
  nlohmann::json details_;
};

// Process exit code for the bench CLI: 2 schema, 3 empty group, 4 model
// contract, 5 internal.
int exit_code_for(ErrorCode code);

// HTTP status for the service: 400 malformed request, 404 unknown id, 422
// contract violation, 500 internal.
int http_status_for(ErrorCode code);

}  // namespace ebench
