#include "cosine/proposer.hpp"

#include "cosine/error.hpp"
#include "cosine/numeric.hpp"
#include "cosine/resources.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace cosine {

using expr::Expr;
using expr::Node;
using expr::Op;

bool accept_if_better(SearchState& state, RoundRecord record, std::optional<TrainResult> result) {
  const double incumbent = state.best_loss();
  record.accepted = !record.failed && std::isfinite(record.val_nll) && record.val_nll < incumbent;
  state.history.push_back(std::move(record));
  if (state.history.back().accepted) {
    state.best = state.history.size() - 1;
    state.best_result = std::move(result);
  }
  return state.history.back().accepted;
}

void validate_proposer(const ProposerConfig& cfg) {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::ConfigError, m); };
  if (cfg.max_terms == 0) bad("max_terms must be >= 1");
  if (!(cfg.heuristic.prune_threshold > 0.0)) bad("prune_threshold must be > 0");
  if (!(cfg.heuristic.stall_tolerance >= 0.0)) bad("stall_tolerance must be >= 0");
  if (cfg.heuristic.stall_window == 0) bad("stall_window must be >= 1");
  if (cfg.kind == ProposerKind::Llm) {
    if (cfg.llm.endpoint.empty()) bad("llm proposer needs an endpoint");
    if (cfg.llm.model.empty()) bad("llm proposer needs a model name");
    if (!(cfg.llm.timeout_s > 0.0)) bad("llm timeout must be > 0");
    if (!(cfg.llm.temperature >= 0.0)) bad("llm temperature must be >= 0");
  }
}

std::string_view to_string(ProposerKind kind) { return kind == ProposerKind::Llm ? "llm" : "heuristic"; }

ProposerKind parse_proposer_kind(const std::string& name) {
  if (name == "heuristic") return ProposerKind::Heuristic;
  if (name == "llm") return ProposerKind::Llm;
  throw Error(ErrorCode::ConfigError, "unknown proposer '" + name + "' (heuristic or llm)");
}

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        const auto it = vars.find(std::string(tmpl.substr(i + 1, close - i - 1)));
        if (it != vars.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

std::string render_init_prompt(const ProposerConfig& cfg, std::size_t channels) {
  return render_template(resources::init_prompt(),
                         {{"feature_dim", std::to_string(channels)},
                          {"description", cfg.description.empty() ? "none given" : cfg.description},
                          {"max_terms", std::to_string(cfg.max_terms)}});
}

namespace {

std::string render_record(const RoundRecord& r) {
  if (r.failed) return "Round " + std::to_string(r.round) + " | training failed: " + r.failure + "\n";
  return render_digest(r.digest);
}

}  // namespace

std::string render_refine_prompt(const ProposerConfig& cfg, const SearchState& state) {
  std::string recent;
  const std::size_t n = state.history.size();
  for (std::size_t k = n > 3 ? n - 3 : 0; k < n; ++k) {
    if (!recent.empty()) recent += "\n";
    recent += render_record(state.history[k]);
  }
  const auto* best = state.best_record();
  return render_template(resources::refine_prompt(),
                         {{"recent_rounds", recent.empty() ? "none yet\n" : recent},
                          {"best_round_details", best ? render_digest(best->digest) : "none yet\n"},
                          {"max_terms", std::to_string(cfg.max_terms)}});
}

BasisLibrary dedup_library(const BasisLibrary& lib, std::size_t channels, std::vector<std::string>* notes) {
  BasisLibrary out;
  for (Stream s : {Stream::Message, Stream::Update}) {
    std::vector<expr::Fingerprint> seen;
    for (const auto& t : lib.stream(s)) {
      auto fp = expr::fingerprint(t.expr, channels);
      const bool dup = std::any_of(seen.begin(), seen.end(), [&](const auto& f) { return expr::equivalent(f, fp); });
      if (dup) {
        if (notes) notes->push_back("dropped " + t.name + ": duplicates an earlier " + std::string(to_string(s)) + " term");
        continue;
      }
      seen.push_back(std::move(fp));
      out.stream(s).push_back(t);
    }
  }
  return out;
}

namespace {

enum class Rung { Linear, Square, Nonlinear, Rational };

struct Classified {
  Rung rung = Rung::Linear;
  Expr base;
};

bool is_const(const Node& n, double v) { return n.op == Op::Const && n.value == v; }

Classified classify(const Expr& e) {
  const Node& r = e.root();
  if (r.op == Op::Pow && r.args.size() == 2 && is_const(*r.args[1], 2.0)) return {Rung::Square, Expr(r.args[0])};
  if (r.op == Op::Mul && r.args.size() == 2 && Expr(r.args[0]) == Expr(r.args[1])) return {Rung::Square, Expr(r.args[0])};
  if ((r.op == Op::Sin || r.op == Op::Tanh) && r.args.size() == 1) return {Rung::Nonlinear, Expr(r.args[0])};
  if (r.op == Op::Div && r.args.size() == 2) {
    const Node& den = *r.args[1];
    if (den.op == Op::Add && den.args.size() == 2 && is_const(*den.args[0], 1.0) && den.args[1]->op == Op::Abs &&
        Expr(den.args[1]->args[0]) == Expr(r.args[0]))
      return {Rung::Rational, Expr(r.args[0])};
  }
  return {Rung::Linear, e};
}

struct Form {
  std::string prefix;
  std::string source;
};

std::vector<Form> forms_after(const std::string& source) {
  const auto c = classify(Expr::parse(source));
  const std::string b = "(" + c.base.to_string() + ")";
  std::vector<Form> all{{"sq_", b + " * " + b}, {"sin_", "torch.sin" + b}, {"tanh_", "torch.tanh" + b},
                        {"sat_", b + " / (1 + torch.abs" + b + ")"}};
  std::size_t skip = 0;
  switch (c.rung) {
    case Rung::Linear: skip = 0; break;
    case Rung::Square: skip = 1; break;
    case Rung::Nonlinear: skip = 3; break;
    case Rung::Rational: skip = 4; break;
  }
  return {all.begin() + static_cast<std::ptrdiff_t>(skip), all.end()};
}

std::string base_name(const std::string& name) {
  for (const char* p : {"sq_", "sin_", "tanh_", "sat_"}) {
    const std::string pre(p);
    if (name.size() > pre.size() && name.compare(0, pre.size(), pre) == 0) return name.substr(pre.size());
  }
  return name;
}

std::string unique_name(const std::vector<BasisTerm>& terms, const std::string& want) {
  auto taken = [&](const std::string& n) {
    return std::any_of(terms.begin(), terms.end(), [&](const BasisTerm& t) { return t.name == n; });
  };
  if (!taken(want)) return want;
  for (int k = 2;; ++k)
    if (!taken(want + "_" + std::to_string(k))) return want + "_" + std::to_string(k);
}

// Mean |w| per term of the stream, taken from the best round's digest.
std::vector<double> strengths(const RoundRecord& best, Stream s) {
  const auto& terms = best.library.stream(s);
  const auto& rows = s == Stream::Message ? best.digest.message : best.digest.update;
  std::vector<double> out(terms.size(), 0.0);
  for (std::size_t t = 0; t < terms.size(); ++t)
    for (const auto& r : rows)
      if (r.name == terms[t].name) out[t] = r.mean_abs_w;
  return out;
}

bool stalled(const SearchState& state, const HeuristicConfig& cfg) {
  // best loss as of each completed round
  std::vector<double> running;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : state.history) {
    if (r.accepted) best = std::min(best, r.val_nll);
    running.push_back(best);
  }
  if (running.size() <= cfg.stall_window) return false;
  const double before = running[running.size() - 1 - cfg.stall_window];
  const double now = running.back();
  if (!std::isfinite(before)) return false;
  const double gain = (before - now) / std::max(std::fabs(before), 1e-300);
  return gain < cfg.stall_tolerance;
}

struct Tried {
  std::vector<expr::Fingerprint> prints;
  bool contains(const expr::Fingerprint& f) const {
    return std::any_of(prints.begin(), prints.end(), [&](const auto& p) { return expr::equivalent(p, f); });
  }
};

Tried tried_forms(const SearchState& state, Stream s, std::size_t channels) {
  Tried t;
  for (const auto& r : state.history)
    for (const auto& term : r.library.stream(s)) t.prints.push_back(expr::fingerprint(term.expr, channels));
  return t;
}

// One escalation step in stream `s`. Returns false when every ladder is used up.
bool escalate(std::vector<BasisTerm>& terms, const std::vector<double>& w, Stream s, const SearchState& state,
              std::size_t channels, std::size_t max_terms, std::vector<std::string>& notes) {
  const Tried tried = tried_forms(state, s, channels);
  std::vector<std::size_t> order(terms.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (w[a] != w[b]) return w[a] < w[b];
    return terms[a].name < terms[b].name;
  });
  for (std::size_t idx : order) {
    if (terms[idx].kind != TermKind::Vector) continue;
    for (const auto& form : forms_after(terms[idx].source)) {
      BasisTerm cand;
      try {
        cand = make_term("tmp", form.source, TermKind::Vector, s, channels);
      } catch (const Error&) {
        continue;
      }
      if (tried.contains(expr::fingerprint(cand.expr, channels))) continue;
      const std::string old = terms[idx].name;
      if (terms.size() < max_terms) {
        cand.name = unique_name(terms, form.prefix + base_name(old));
        notes.push_back("escalated " + old + ": added " + cand.name + " = " + cand.source);
        terms.push_back(std::move(cand));
      } else {
        std::vector<BasisTerm> others = terms;
        others.erase(others.begin() + static_cast<std::ptrdiff_t>(idx));
        cand.name = unique_name(others, form.prefix + base_name(old));
        notes.push_back("escalated " + old + ": replaced by " + cand.name + " = " + cand.source);
        terms[idx] = std::move(cand);
      }
      return true;
    }
  }
  return false;
}

}  // namespace

std::vector<std::string> ladder_after(const std::string& source) {
  std::vector<std::string> out;
  for (const auto& f : forms_after(source)) out.push_back(Expr::parse(f.source).to_string());
  return out;
}

Proposal heuristic_propose(const SearchState& state, std::size_t channels, const ProposerConfig& cfg) {
  Proposal p;
  p.source = "heuristic";
  const RoundRecord* best = state.best_record();
  if (!best) {
    p.library = seed_library(channels);
    p.notes.push_back("no accepted round yet: seed library");
    return p;
  }
  BasisLibrary lib = best->library;

  // (a) prune negligible terms, keeping at least one per stream
  bool pruned = false;
  for (Stream s : {Stream::Message, Stream::Update}) {
    auto& terms = lib.stream(s);
    const auto w = strengths(*best, s);
    const double top = w.empty() ? 0.0 : *std::max_element(w.begin(), w.end());
    std::vector<BasisTerm> kept;
    for (std::size_t t = 0; t < terms.size(); ++t) {
      if (w[t] < cfg.heuristic.prune_threshold * top) {
        p.notes.push_back("pruned " + terms[t].name + " (mean|w| " + format_double(w[t]) + ")");
        continue;
      }
      kept.push_back(terms[t]);
    }
    if (kept.empty()) {
      // everything negligible: keep the strongest
      const auto at = static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
      kept.push_back(terms[at]);
      p.notes.push_back("kept " + terms[at].name + " so the stream is not empty");
    }
    if (kept.size() != terms.size()) pruned = true;
    terms = std::move(kept);
  }

  // (b) escalate when the search stalls or pruning had nothing to do
  if (!pruned || stalled(state, cfg.heuristic)) {
    auto weights_for = [&](Stream s) {
      const auto full = strengths(*best, s);
      std::vector<double> w;
      for (const auto& t : lib.stream(s)) {
        double v = 0.0;
        for (std::size_t k = 0; k < best->library.stream(s).size(); ++k)
          if (best->library.stream(s)[k].name == t.name) v = full[k];
        w.push_back(v);
      }
      return w;
    };
    bool changed = escalate(lib.message_terms, weights_for(Stream::Message), Stream::Message, state, channels,
                            cfg.max_terms, p.notes);
    auto& upd = lib.update_terms;
    const auto hdeg = make_term("hdeg", "h / (deg + 1e-6)", TermKind::Vector, Stream::Update, channels);
    const auto hdeg_fp = expr::fingerprint(hdeg.expr, channels);
    const bool has_hdeg = std::any_of(upd.begin(), upd.end(), [&](const BasisTerm& t) {
      return expr::equivalent(expr::fingerprint(t.expr, channels), hdeg_fp);
    });
    if (!has_hdeg && upd.size() < cfg.max_terms) {
      auto t = hdeg;
      t.name = unique_name(upd, "hdeg");
      p.notes.push_back("offered " + t.name + " = " + t.source);
      upd.push_back(std::move(t));
      changed = true;
    }
    if (!changed)
      changed = escalate(upd, weights_for(Stream::Update), Stream::Update, state, channels, cfg.max_terms, p.notes);
    if (!changed) p.notes.push_back("ladders exhausted: no edit left");
  }

  p.library = dedup_library(lib, channels, &p.notes);
  validate_library(p.library, channels, cfg.max_terms);
  return p;
}

Proposal propose(const ProposerConfig& cfg, const SearchState& state, std::size_t channels, ChatTransport* transport) {
  if (cfg.kind == ProposerKind::Heuristic) return heuristic_propose(state, channels, cfg);

  auto fall_back = [&](Proposal partial, const std::string& why) {
    if (!cfg.llm.fallback) throw Error(ErrorCode::ProposerUnavailable, why);
    Proposal p = heuristic_propose(state, channels, cfg);
    p.source = "llm-fallback";
    p.exchanges = std::move(partial.exchanges);
    p.notes.insert(p.notes.begin(), "language model unusable (" + why + "), used the heuristic");
    return p;
  };

  Proposal out;
  out.source = "llm";
  if (!transport) return fall_back(std::move(out), "no transport");

  const std::string prompt = state.history.empty() ? render_init_prompt(cfg, channels) : render_refine_prompt(cfg, state);
  std::string last_error;
  for (std::size_t attempt = 0; attempt <= cfg.llm.retries; ++attempt) {
    ChatRequest req;
    req.model = cfg.llm.model;
    req.temperature = cfg.llm.temperature;
    req.messages.push_back({"system", std::string(resources::system_prompt())});
    std::string user = prompt;
    if (!last_error.empty())
      user += "\n\nYour previous reply was rejected: " + last_error + "\nSend a corrected JSON object.";
    req.messages.push_back({"user", std::move(user)});

    std::string reply;
    try {
      reply = transport->send(req);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ProposerUnavailable) throw;
      return fall_back(std::move(out), e.what());
    }
    out.exchanges.push_back({req, reply});
    try {
      out.library = dedup_library(parse_library_json(reply, channels, cfg.max_terms), channels, &out.notes);
      return out;
    } catch (const Error& e) {
      last_error = e.what();
      out.notes.push_back("reply " + std::to_string(attempt) + " rejected: " + last_error);
    }
  }
  return fall_back(std::move(out), "no valid reply after " + std::to_string(cfg.llm.retries + 1) + " attempts");
}

}  // namespace cosine
