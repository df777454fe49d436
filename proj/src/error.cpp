#include "cosine/error.hpp"

namespace cosine {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownCharacter: return "UnknownCharacter";
    case ErrorCode::SourceTooLong: return "SourceTooLong";
    case ErrorCode::SyntaxError: return "SyntaxError";
    case ErrorCode::UnknownFunction: return "UnknownFunction";
    case ErrorCode::UnknownIdentifier: return "UnknownIdentifier";
    case ErrorCode::ArityMismatch: return "ArityMismatch";
    case ErrorCode::ForbiddenConstruct: return "ForbiddenConstruct";
    case ErrorCode::ScopeViolation: return "ScopeViolation";
    case ErrorCode::ChannelOutOfRange: return "ChannelOutOfRange";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::BudgetExceeded: return "BudgetExceeded";
    case ErrorCode::DuplicateName: return "DuplicateName";
    case ErrorCode::NonPositiveTemperature: return "NonPositiveTemperature";
    case ErrorCode::CacheMismatch: return "CacheMismatch";
    case ErrorCode::CacheConsumed: return "CacheConsumed";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::NonFiniteState: return "NonFiniteState";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::MissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::DegenerateTruth: return "DegenerateTruth";
    case ErrorCode::ProposerUnavailable: return "ProposerUnavailable";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

namespace {
std::string compose(ErrorCode code, const std::string& detail, std::size_t position) {
  std::string msg(to_string(code));
  if (position != Error::npos) msg += " at " + std::to_string(position);
  if (!detail.empty()) msg += ": " + detail;
  return msg;
}
}  // namespace

Error::Error(ErrorCode code, const std::string& detail, std::size_t position)
    : std::runtime_error(compose(code, detail, position)),
      code_(code),
      position_(position),
      detail_(detail) {}

}  // namespace cosine
