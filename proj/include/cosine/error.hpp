#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cosine {

enum class ErrorCode {
  // expression language
  UnknownCharacter,
  SourceTooLong,
  SyntaxError,
  UnknownFunction,
  UnknownIdentifier,
  ArityMismatch,
  ForbiddenConstruct,
  ScopeViolation,
  ChannelOutOfRange,
  NonFiniteInput,
  // library wire schema
  SchemaViolation,
  BudgetExceeded,
  DuplicateName,
  // graph generator / model
  NonPositiveTemperature,
  CacheMismatch,
  CacheConsumed,
  ShapeMismatch,
  EmptyDataset,
  DivergedLoss,
  // systems / datasets
  InvalidSpec,
  NonFiniteState,
  FormatError,
  ChecksumMismatch,
  MissingGroundTruth,
  // metrics
  DegenerateTruth,
  // outer loop / plumbing
  ProposerUnavailable,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries a machine-checkable code.
// `position` is a character offset for expression errors and a line number
// for file-format errors; it is npos otherwise.
class Error : public std::runtime_error {
public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  Error(ErrorCode code, const std::string& detail, std::size_t position = npos);

  ErrorCode code() const noexcept { return code_; }
  std::size_t position() const noexcept { return position_; }
  const std::string& detail() const noexcept { return detail_; }

private:
  ErrorCode code_;
  std::size_t position_;
  std::string detail_;
};

}  // namespace cosine
