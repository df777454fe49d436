#include "cosine/library.hpp"

#include "cosine/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "json.hpp"

namespace cosine {

std::string_view to_string(TermKind kind) { return kind == TermKind::Vector ? "vector" : "scalar"; }
std::string_view to_string(Stream stream) { return stream == Stream::Message ? "message_terms" : "update_terms"; }
expr::VarScope scope_of(Stream stream) {
  return stream == Stream::Message ? expr::VarScope::Message : expr::VarScope::Update;
}

BasisTerm make_term(std::string name, std::string source, TermKind kind, Stream stream, std::size_t channels) {
  BasisTerm t;
  t.expr = expr::Expr::parse(source);
  expr::validate_scope(t.expr, scope_of(stream), channels);
  if (kind == TermKind::Scalar && t.expr.output_width(channels) != 1) {
    throw Error(ErrorCode::SchemaViolation,
                std::string(to_string(stream)) + "/" + name + ": scalar term is not scalar-valued");
  }
  t.name = std::move(name);
  t.source = std::move(source);
  t.kind = kind;
  return t;
}

bool operator==(const BasisLibrary& a, const BasisLibrary& b) {
  auto same = [](const std::vector<BasisTerm>& x, const std::vector<BasisTerm>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i].name != y[i].name || x[i].kind != y[i].kind || !(x[i].expr == y[i].expr)) return false;
    }
    return true;
  };
  return same(a.message_terms, b.message_terms) && same(a.update_terms, b.update_terms);
}

namespace {

void check_budget(Stream s, std::size_t count, std::size_t max_terms) {
  if (count == 0 || count > max_terms) {
    throw Error(ErrorCode::BudgetExceeded, std::string(to_string(s)) + " has " + std::to_string(count) +
                                               " terms (allowed 1.." + std::to_string(max_terms) + ")");
  }
}

}  // namespace

void validate_library(const BasisLibrary& lib, std::size_t channels, std::size_t max_terms) {
  for (Stream s : {Stream::Message, Stream::Update}) {
    const auto& terms = lib.stream(s);
    check_budget(s, terms.size(), max_terms);
    std::set<std::string> names;
    for (const auto& t : terms) {
      if (!names.insert(t.name).second) {
        throw Error(ErrorCode::DuplicateName, std::string(to_string(s)) + "/" + t.name);
      }
      expr::validate_scope(t.expr, scope_of(s), channels);
      if (t.kind == TermKind::Scalar && t.expr.output_width(channels) != 1) {
        throw Error(ErrorCode::SchemaViolation, t.name + ": scalar term is not scalar-valued");
      }
    }
  }
}

std::string strip_fences(std::string_view text) {
  auto trim = [](std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return std::string_view{};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  };
  std::string_view s = trim(text);
  if (s.starts_with("```")) {
    const auto nl = s.find('\n');
    if (nl == std::string_view::npos) return std::string(s);
    // The opening fence may carry a language tag and nothing else.
    const std::string_view tag = trim(s.substr(3, nl - 3));
    if (!tag.empty() && tag != "json" && tag != "JSON") return std::string(s);
    s = s.substr(nl + 1);
    s = trim(s);
    if (s.ends_with("```")) s = trim(s.substr(0, s.size() - 3));
  }
  return std::string(s);
}

BasisLibrary parse_library_json(std::string_view text, std::size_t channels, std::size_t max_terms) {
  using nlohmann::json;
  const std::string body = strip_fences(text);
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("not a JSON object: ") + e.what());
  }
  if (!doc.is_object()) throw Error(ErrorCode::SchemaViolation, "top level must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (key != "message_terms" && key != "update_terms") {
      throw Error(ErrorCode::SchemaViolation, "unexpected top-level field '" + key + "'");
    }
  }
  BasisLibrary lib;
  for (Stream s : {Stream::Message, Stream::Update}) {
    const std::string key(to_string(s));
    if (!doc.contains(key)) throw Error(ErrorCode::SchemaViolation, "missing field '" + key + "'");
    const json& arr = doc.at(key);
    if (!arr.is_array()) throw Error(ErrorCode::SchemaViolation, "'" + key + "' must be an array");
    check_budget(s, arr.size(), max_terms);
    std::set<std::string> names;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const json& item = arr[i];
      const std::string where = key + "[" + std::to_string(i) + "]";
      if (!item.is_object()) throw Error(ErrorCode::SchemaViolation, where + " must be an object");
      for (const auto& [field, value] : item.items()) {
        if (field != "name" && field != "expr" && field != "type") {
          throw Error(ErrorCode::SchemaViolation, where + ": unexpected field '" + field + "'");
        }
        if (!value.is_string() || value.get_ref<const std::string&>().empty()) {
          throw Error(ErrorCode::SchemaViolation, where + ": field '" + field + "' must be a non-empty string");
        }
      }
      for (const char* field : {"name", "expr", "type"}) {
        if (!item.contains(field)) {
          throw Error(ErrorCode::SchemaViolation, where + ": missing field '" + std::string(field) + "'");
        }
      }
      const std::string& type = item["type"].get_ref<const std::string&>();
      if (type != "vector" && type != "scalar") {
        throw Error(ErrorCode::SchemaViolation, where + ": type must be \"vector\" or \"scalar\"");
      }
      std::string name = item["name"].get<std::string>();
      if (!names.insert(name).second) throw Error(ErrorCode::DuplicateName, key + "/" + name);
      lib.stream(s).push_back(make_term(std::move(name), item["expr"].get<std::string>(),
                                        type == "vector" ? TermKind::Vector : TermKind::Scalar, s, channels));
    }
  }
  return lib;
}

std::string library_to_json(const BasisLibrary& lib, int indent) {
  nlohmann::ordered_json doc;
  for (Stream s : {Stream::Message, Stream::Update}) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& t : lib.stream(s)) {
      nlohmann::ordered_json item;
      item["name"] = t.name;
      item["expr"] = t.source;
      item["type"] = std::string(to_string(t.kind));
      arr.push_back(std::move(item));
    }
    doc[std::string(to_string(s))] = std::move(arr);
  }
  return doc.dump(indent);
}

BasisLibrary seed_library(std::size_t channels) {
  if (channels == 0) throw Error(ErrorCode::ShapeMismatch, "D must be >= 1");
  BasisLibrary lib;
  lib.message_terms.push_back(make_term("diff", "xj - xi", TermKind::Vector, Stream::Message, channels));
  lib.message_terms.push_back(make_term("prod", "xi * xj", TermKind::Vector, Stream::Message, channels));
  lib.update_terms.push_back(make_term("x", "x", TermKind::Vector, Stream::Update, channels));
  lib.update_terms.push_back(make_term("h", "h", TermKind::Vector, Stream::Update, channels));
  lib.update_terms.push_back(make_term("hdeg", "h / (deg + 1e-6)", TermKind::Vector, Stream::Update, channels));
  return lib;
}

double mean_abs(std::span<const double> row) {
  if (row.empty()) return 0.0;
  double s = 0.0;
  for (double v : row) s += std::fabs(v);
  return s / static_cast<double>(row.size());
}

ResidualSummary summarize_residuals(std::span<const double> residuals, std::size_t nodes, std::size_t channels) {
  ResidualSummary out;
  out.channel_mean_abs.assign(channels, 0.0);
  out.channel_max_abs.assign(channels, 0.0);
  if (nodes == 0 || channels == 0 || residuals.empty()) return out;
  if (residuals.size() % (nodes * channels) != 0) {
    throw Error(ErrorCode::ShapeMismatch, "residuals are not samples x nodes x channels");
  }
  const std::size_t samples = residuals.size() / (nodes * channels);
  std::vector<double> node_err(nodes, 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t n = 0; n < nodes; ++n) {
      for (std::size_t d = 0; d < channels; ++d) {
        const double a = std::fabs(residuals[(s * nodes + n) * channels + d]);
        out.channel_mean_abs[d] += a;
        out.channel_max_abs[d] = std::max(out.channel_max_abs[d], a);
        node_err[n] += a;
      }
    }
  }
  for (double& m : out.channel_mean_abs) m /= static_cast<double>(samples * nodes);
  std::vector<std::size_t> order(nodes);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return node_err[a] > node_err[b]; });
  order.resize(std::min<std::size_t>(5, nodes));
  out.worst_nodes = std::move(order);
  return out;
}

namespace {

std::vector<TermWeight> weigh(const std::vector<BasisTerm>& terms, std::span<const double> w, std::size_t channels) {
  if (w.size() != terms.size() * channels) {
    throw Error(ErrorCode::ShapeMismatch, "coefficient matrix does not match the library");
  }
  std::vector<TermWeight> out;
  for (std::size_t m = 0; m < terms.size(); ++m) {
    out.push_back({terms[m].name, terms[m].source, mean_abs(w.subspan(m * channels, channels))});
  }
  std::sort(out.begin(), out.end(), [](const TermWeight& a, const TermWeight& b) {
    if (a.mean_abs_w != b.mean_abs_w) return a.mean_abs_w > b.mean_abs_w;
    return a.name < b.name;
  });
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

template <typename T>
std::string list(const std::vector<T>& xs) {
  std::string s = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ", ";
    if constexpr (std::is_floating_point_v<T>) {
      s += fmt(xs[i]);
    } else {
      s += std::to_string(xs[i]);
    }
  }
  return s + "]";
}

}  // namespace

LibraryDigest make_digest(std::size_t round, double val_loss, const BasisLibrary& lib, std::span<const double> w_msg,
                          std::span<const double> w_upd, std::size_t channels, ResidualSummary residuals) {
  LibraryDigest d;
  d.round = round;
  d.val_loss = val_loss;
  d.message = weigh(lib.message_terms, w_msg, channels);
  d.update = weigh(lib.update_terms, w_upd, channels);
  d.residuals = std::move(residuals);
  return d;
}

std::string render_digest(const LibraryDigest& digest) {
  std::string out = "Round " + std::to_string(digest.round) + " | nll = " + fmt(digest.val_loss) + "\n";
  auto block = [&](const char* title, const std::vector<TermWeight>& terms) {
    out += title;
    out += ":\n";
    for (const auto& t : terms) {
      out += "  - " + t.name + " | mean|w| = " + fmt(t.mean_abs_w) + " | expr: " + t.expr + "\n";
    }
  };
  block("Message terms", digest.message);
  block("Update terms", digest.update);
  const auto& r = digest.residuals;
  if (!r.channel_mean_abs.empty()) {
    out += "Residuals: mean|r| per channel = " + list(r.channel_mean_abs) +
           ", max|r| per channel = " + list(r.channel_max_abs) + ", worst nodes = " + list(r.worst_nodes) + "\n";
  }
  return out;
}

}  // namespace cosine
