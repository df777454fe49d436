#include "cosine/metrics.hpp"

#include "cosine/error.hpp"
#include "cosine/numeric.hpp"
#include "cosine/resources.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

namespace cosine {

double auc(std::span<const double> scores, std::span<const std::uint8_t> truth, std::size_t n) {
  if (scores.size() != n * n || truth.size() != n * n) throw Error(ErrorCode::ShapeMismatch, "scores/truth not N x N");
  std::vector<std::pair<double, std::uint8_t>> pairs;
  pairs.reserve(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) pairs.emplace_back(scores[i * n + j], truth[i * n + j] ? 1 : 0);
  std::size_t pos = 0;
  for (const auto& p : pairs) pos += p.second;
  const std::size_t neg = pairs.size() - pos;
  if (pos == 0 || neg == 0) throw Error(ErrorCode::DegenerateTruth, "truth needs both edges and non-edges");
  for (const auto& p : pairs)
    if (std::isnan(p.first)) throw Error(ErrorCode::ShapeMismatch, "scores contain NaN");

  // Mann-Whitney: average ranks over tie groups, then U from the positive rank sum.
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  std::size_t k = 0;
  while (k < pairs.size()) {
    std::size_t end = k;
    std::size_t pos_in_group = 0;
    while (end < pairs.size() && pairs[end].first == pairs[k].first) pos_in_group += pairs[end++].second;
    // group occupies ranks k+1 .. end
    rank_sum += static_cast<double>(pos_in_group) * static_cast<double>(k + 1 + end) / 2.0;
    k = end;
  }
  const double P = static_cast<double>(pos);
  const double u = rank_sum - P * (P + 1.0) / 2.0;
  return u / (P * static_cast<double>(neg));
}

std::map<std::string, Primitives> parse_primitives(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("primitives: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::SchemaViolation, "primitives: expected an object");
  std::map<std::string, Primitives> out;
  for (const auto& [system, entry] : j.items()) {
    if (!entry.is_object()) throw Error(ErrorCode::SchemaViolation, "primitives: '" + system + "' is not an object");
    Primitives p;
    for (const auto& [key, list] : entry.items()) {
      std::vector<std::string>* dst = nullptr;
      expr::VarScope scope{};
      if (key == "message") {
        dst = &p.message;
        scope = expr::VarScope::Message;
      } else if (key == "update") {
        dst = &p.update;
        scope = expr::VarScope::Update;
      } else {
        throw Error(ErrorCode::SchemaViolation, "primitives: unexpected key '" + key + "'");
      }
      if (!list.is_array()) throw Error(ErrorCode::SchemaViolation, "primitives: '" + key + "' is not a list");
      for (const auto& s : list) {
        if (!s.is_string()) throw Error(ErrorCode::SchemaViolation, "primitives: expressions must be strings");
        expr::validate_scope(expr::Expr::parse(s.get<std::string>()), scope, 1);
        dst->push_back(s.get<std::string>());
      }
    }
    out.emplace(system, std::move(p));
  }
  return out;
}

const std::map<std::string, Primitives>& builtin_primitives() {
  static const auto table = parse_primitives(resources::primitives_json());
  return table;
}

std::vector<std::size_t> rank_terms(const std::vector<BasisTerm>& terms, std::span<const double> w,
                                    std::size_t channels) {
  if (w.size() != terms.size() * channels) throw Error(ErrorCode::ShapeMismatch, "coefficients do not match terms");
  std::vector<double> strength(terms.size());
  for (std::size_t t = 0; t < terms.size(); ++t) strength[t] = mean_abs(w.subspan(t * channels, channels));
  std::vector<std::size_t> idx(terms.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (strength[a] != strength[b]) return strength[a] > strength[b];
    return terms[a].name < terms[b].name;
  });
  return idx;
}

double term_accuracy(const std::vector<BasisTerm>& terms, std::span<const double> w,
                     const std::vector<std::string>& required, std::size_t k, std::size_t channels) {
  if (required.empty()) return 1.0;
  const auto order = rank_terms(terms, w, channels);
  const std::size_t top = std::min(k, order.size());
  std::vector<expr::Fingerprint> prints;
  for (std::size_t r = 0; r < top; ++r) prints.push_back(expr::fingerprint(terms[order[r]].expr, channels));
  std::size_t found = 0;
  for (const auto& src : required) {
    const auto want = expr::fingerprint(expr::Expr::parse(src), channels);
    for (const auto& p : prints)
      if (expr::equivalent(p, want)) {
        ++found;
        break;
      }
  }
  return static_cast<double>(found) / static_cast<double>(required.size());
}

TermAccuracy term_accuracy(const BasisLibrary& lib, std::span<const double> w_msg, std::span<const double> w_upd,
                           const Primitives& required, std::size_t k, std::size_t channels) {
  return {term_accuracy(lib.message_terms, w_msg, required.message, k, channels),
          term_accuracy(lib.update_terms, w_upd, required.update, k, channels)};
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string edges_csv(std::span<const double> scores, const std::vector<std::uint8_t>* truth, std::size_t n) {
  std::string out = truth ? "i,j,score,truth\n" : "i,j,score\n";
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      out += std::to_string(i) + "," + std::to_string(j) + "," + format_double(scores[i * n + j]);
      if (truth) out += "," + std::to_string(static_cast<int>((*truth)[i * n + j]));
      out += "\n";
    }
  return out;
}

std::string terms_csv(const std::vector<TermRow>& rows) {
  std::string out = "name,expr,mean_abs_w,stream,round\n";
  for (const auto& r : rows) {
    out += csv_field(r.name) + "," + csv_field(r.expr) + "," + format_double(r.mean_abs_w) + "," + r.stream + "," +
           std::to_string(r.round) + "\n";
  }
  return out;
}

}  // namespace cosine
