#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gradprobe {

enum class ErrorCode {
  kInvalidArgument,
  kShapeMismatch,
  kNonFinite,
  kLabelOutOfRange,
  kUnsupportedMode,
  kDivisionGuard,
  kConfigConflict,
  kEmptyWindow,
  kDegenerateSample,
  kUnstableInterval,
  kCollinear,
  kBadMagic,
  kBadVersion,
  kBadMode,
  kBadDtype,
  kTruncated,
  kTrailingBytes,
  kParse,
  kNonMonotone,
  kIo,
  kDiverged,
};

std::string_view error_code_name(ErrorCode code);

/// All library failures are reported through this exception; `code()` is
/// stable and is what the CLI maps onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace gradprobe
