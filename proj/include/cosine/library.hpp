#pragma once

// Basis libraries: the two named term streams, their JSON wire format and the
// per-round feedback digest handed back to a proposer.

#include "cosine/exprlang.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cosine {

inline constexpr std::size_t kDefaultMaxTerms = 8;

enum class TermKind { Vector, Scalar };
enum class Stream { Message, Update };

std::string_view to_string(TermKind kind);
std::string_view to_string(Stream stream);
expr::VarScope scope_of(Stream stream);

struct BasisTerm {
  std::string name;
  std::string source;  // expression text as received
  expr::Expr expr;
  TermKind kind = TermKind::Vector;
};

// Parses, scope-checks and width-checks one term. A scalar term must be
// scalar-valued; a vector term may be either (scalars broadcast).
BasisTerm make_term(std::string name, std::string source, TermKind kind, Stream stream, std::size_t channels);

struct BasisLibrary {
  std::vector<BasisTerm> message_terms;
  std::vector<BasisTerm> update_terms;

  const std::vector<BasisTerm>& stream(Stream s) const {
    return s == Stream::Message ? message_terms : update_terms;
  }
  std::vector<BasisTerm>& stream(Stream s) { return s == Stream::Message ? message_terms : update_terms; }
};

// Same names, kinds and expression trees, in the same order.
bool operator==(const BasisLibrary& a, const BasisLibrary& b);

// Checks budgets, name uniqueness, scope and widths of an assembled library.
void validate_library(const BasisLibrary& lib, std::size_t channels, std::size_t max_terms);

// Removes one surrounding markdown code fence, if present.
std::string strip_fences(std::string_view text);

// Strict parse of a proposer reply.
// Throws Error{SchemaViolation, BudgetExceeded, DuplicateName, ScopeViolation,
// ChannelOutOfRange} or any expression-language error.
BasisLibrary parse_library_json(std::string_view text, std::size_t channels, std::size_t max_terms = kDefaultMaxTerms);

// Schema-exact JSON; parse_library_json(library_to_json(l)) == l.
std::string library_to_json(const BasisLibrary& lib, int indent = 2);

BasisLibrary seed_library(std::size_t channels);

struct TermWeight {
  std::string name;
  std::string expr;
  double mean_abs_w = 0.0;
};

struct ResidualSummary {
  std::vector<double> channel_mean_abs;
  std::vector<double> channel_max_abs;
  std::vector<std::size_t> worst_nodes;  // up to 5, worst first
};

// `residuals` is samples x nodes x channels, row-major.
ResidualSummary summarize_residuals(std::span<const double> residuals, std::size_t nodes, std::size_t channels);

struct LibraryDigest {
  std::size_t round = 0;
  double val_loss = 0.0;
  std::vector<TermWeight> message;  // descending mean |w|, ties by name
  std::vector<TermWeight> update;
  ResidualSummary residuals;
};

double mean_abs(std::span<const double> row);

// `w_msg` is M x D and `w_upd` is U x D, row-major, in library term order.
LibraryDigest make_digest(std::size_t round, double val_loss, const BasisLibrary& lib, std::span<const double> w_msg,
                          std::span<const double> w_upd, std::size_t channels, ResidualSummary residuals = {});

// Plain-text block used for prompt templating.
std::string render_digest(const LibraryDigest& digest);

}  // namespace cosine
