#pragma once

// Edge-recovery AUC, term accuracy against reference primitives, and the
// small CSV writers used by run reports.

#include "cosine/library.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cosine {

// ROC AUC over ordered off-diagonal pairs, ties counted one half.
// Throws Error{DegenerateTruth} when truth lacks a positive or a negative pair,
// Error{ShapeMismatch} on size errors.
double auc(std::span<const double> scores, std::span<const std::uint8_t> truth, std::size_t nodes);

struct Primitives {
  std::vector<std::string> message;
  std::vector<std::string> update;
};

// Parses {"system": {"message": [...], "update": [...]}, ...}; every
// expression must parse and scope-check. Throws Error{SchemaViolation} or an
// expression error.
std::map<std::string, Primitives> parse_primitives(std::string_view json_text);
// The built-in table, one entry per benchmark system.
const std::map<std::string, Primitives>& builtin_primitives();

// Term indices sorted by mean |w| descending, ties by name.
std::vector<std::size_t> rank_terms(const std::vector<BasisTerm>& terms, std::span<const double> w,
                                    std::size_t channels);

// Fraction of `required` matched (up to sign and scale) by a top-K term.
// Empty `required` scores 1.
double term_accuracy(const std::vector<BasisTerm>& terms, std::span<const double> w,
                     const std::vector<std::string>& required, std::size_t k, std::size_t channels);

struct TermAccuracy {
  double message = 1.0;
  double update = 1.0;
};

TermAccuracy term_accuracy(const BasisLibrary& lib, std::span<const double> w_msg, std::span<const double> w_upd,
                           const Primitives& required, std::size_t k, std::size_t channels);

// i,j,score[,truth] over ordered off-diagonal pairs.
std::string edges_csv(std::span<const double> scores, const std::vector<std::uint8_t>* truth, std::size_t nodes);

struct TermRow {
  std::string name, expr;
  double mean_abs_w = 0.0;
  std::string stream;  // "message" or "update"
  std::size_t round = 0;
};

// name,expr,mean_abs_w,stream,round with expressions quoted as needed.
std::string terms_csv(const std::vector<TermRow>& rows);

// RFC 4180 quoting when the field needs it.
std::string csv_field(std::string_view s);

}  // namespace cosine
