#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace segcal {

enum class ErrorCode {
  kNonPositiveTemperature,
  kNonFiniteInput,
  kDimensionMismatch,
  kInvalidArgument,
  kInvalidLabel,
  kEmptyInput,
  kLengthMismatch,
  kAllPixelsIgnored,
  kEmptyDataset,
  kInvalidBounds,
  kNonFiniteGradient,
  kDegenerateLabels,
  kSplitMissing,
  kEmptySplit,
  kShapeMismatch,
  kEmptyEnsemble,
  kClassCountMismatch,
  kBadMagic,
  kVersionUnsupported,
  kTruncatedPayload,
  kTrailingBytes,
  kFormatError,
  kIoError,
};

std::string_view error_code_name(ErrorCode code);

// All library failures are reported through this exception. The optional
// context carries the offending image id, step index or byte offset
// depending on the code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::uint64_t> context = std::nullopt);

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::uint64_t> context() const noexcept { return context_; }

 private:
  ErrorCode code_;
  std::optional<std::uint64_t> context_;
};

}  // namespace segcal
