// Error type shared by every sessionrank module.
//
// Failures are reported by throwing sessionrank::Error. The code identifies
// the failure class; field() names the offending input field (when there is
// one) and line() the 1-based line of a JSONL input (0 when not applicable).

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sessionrank {

enum class ErrorCode {
  MissingField,
  InvalidField,
  UnknownAction,
  NonPositiveTimestamp,
  ParseError,
  DuplicateTitleId,
  EmptyGenres,
  UnknownTitle,
  StoreClosed,
  UnsortedInput,
  UnknownCandidate,
  VariantMismatch,
  EmptyCatalog,
  BadMagic,
  VersionMismatch,
  ShapeMismatch,
  TruncatedFile,
  IoError,
  NonFiniteLoss,
  EmptyExamples,
  NonFiniteGradient,
  InvalidConfig,
  NoEvalPoints,
  MismatchedEvalSets,
  TargetUnreachable,
  InvalidArgument,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MissingField: return "MissingField";
    case ErrorCode::InvalidField: return "InvalidField";
    case ErrorCode::UnknownAction: return "UnknownAction";
    case ErrorCode::NonPositiveTimestamp: return "NonPositiveTimestamp";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::DuplicateTitleId: return "DuplicateTitleId";
    case ErrorCode::EmptyGenres: return "EmptyGenres";
    case ErrorCode::UnknownTitle: return "UnknownTitle";
    case ErrorCode::StoreClosed: return "StoreClosed";
    case ErrorCode::UnsortedInput: return "UnsortedInput";
    case ErrorCode::UnknownCandidate: return "UnknownCandidate";
    case ErrorCode::VariantMismatch: return "VariantMismatch";
    case ErrorCode::EmptyCatalog: return "EmptyCatalog";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptyExamples: return "EmptyExamples";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NoEvalPoints: return "NoEvalPoints";
    case ErrorCode::MismatchedEvalSets: return "MismatchedEvalSets";
    case ErrorCode::TargetUnreachable: return "TargetUnreachable";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string message, std::string field = {},
        std::size_t line = 0)
      : std::runtime_error(format(code, message, field, line)),
        code_(code),
        field_(std::move(field)),
        line_(line),
        detail_(std::move(message)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& field() const noexcept { return field_; }
  std::size_t line() const noexcept { return line_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  static std::string format(ErrorCode code, const std::string& message,
                            const std::string& field, std::size_t line) {
    std::string out(to_string(code));
    if (line != 0) out += " (line " + std::to_string(line) + ")";
    if (!field.empty()) out += " [" + field + "]";
    if (!message.empty()) out += ": " + message;
    return out;
  }

  ErrorCode code_;
  std::string field_;
  std::size_t line_;
  std::string detail_;
};

}  // namespace sessionrank
