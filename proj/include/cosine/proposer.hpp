#pragma once

// Library proposals for the outer loop: the search state shared with evolve,
// a deterministic heuristic editor, and the language-model proposer.

#include "cosine/chat_client.hpp"
#include "cosine/dynmodel.hpp"
#include "cosine/library.hpp"

#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cosine {

struct RoundRecord {
  std::size_t round = 0;
  BasisLibrary library;
  double val_nll = std::numeric_limits<double>::infinity();
  double val_total = std::numeric_limits<double>::infinity();
  LibraryDigest digest;
  bool accepted = false;
  bool failed = false;        // training diverged or was otherwise aborted
  std::string failure;        // error text when failed
  std::string source;         // "seed", "given", "heuristic", "llm", "llm-fallback"
};

struct SearchState {
  std::vector<RoundRecord> history;
  std::optional<std::size_t> best;  // index into history
  std::optional<TrainResult> best_result;

  const RoundRecord* best_record() const { return best ? &history[*best] : nullptr; }
  double best_loss() const { return best ? history[*best].val_nll : std::numeric_limits<double>::infinity(); }
};

// Appends `record` to the history. It is accepted only when it did not fail
// and its val L_nll is strictly below the incumbent's; ties reject.
bool accept_if_better(SearchState& state, RoundRecord record, std::optional<TrainResult> result);

enum class ProposerKind { Heuristic, Llm };

struct HeuristicConfig {
  double prune_threshold = 1e-3;  // relative to the stream's largest mean|w|
  double stall_tolerance = 0.01;  // relative improvement counted as progress
  std::size_t stall_window = 2;   // rounds looked back
};

struct LlmConfig {
  std::string endpoint;
  std::string model = "gpt-oss-20b";
  std::string token_env = "COSINE_API_TOKEN";
  double timeout_s = 120.0;
  std::size_t retries = 2;  // schema-repair attempts after the first reply
  double temperature = 0.7;
  bool fallback = true;     // use the heuristic when the model cannot deliver
};

struct ProposerConfig {
  ProposerKind kind = ProposerKind::Heuristic;
  HeuristicConfig heuristic;
  LlmConfig llm;
  std::size_t max_terms = kDefaultMaxTerms;
  std::string description;  // free text handed to the initial prompt
};

// Throws Error{ConfigError}.
void validate_proposer(const ProposerConfig& cfg);

std::string_view to_string(ProposerKind kind);
ProposerKind parse_proposer_kind(const std::string& name);  // "heuristic" | "llm"

struct Proposal {
  BasisLibrary library;
  std::string source;
  std::vector<Exchange> exchanges;  // chat traffic behind this proposal
  std::vector<std::string> notes;   // human-readable edit log
};

// Replaces {name} placeholders; unknown placeholders are left alone.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& vars);
std::string render_init_prompt(const ProposerConfig& cfg, std::size_t channels);
std::string render_refine_prompt(const ProposerConfig& cfg, const SearchState& state);

// Collapses terms whose fingerprints coincide within a stream (first kept).
BasisLibrary dedup_library(const BasisLibrary& lib, std::size_t channels, std::vector<std::string>* notes = nullptr);

// Pure function of (state, cfg). An empty history yields seed_library.
Proposal heuristic_propose(const SearchState& state, std::size_t channels, const ProposerConfig& cfg);

// Dispatches on cfg.kind. The LLM path needs a transport; without one it
// falls back (or throws ProposerUnavailable when fallback is off).
Proposal propose(const ProposerConfig& cfg, const SearchState& state, std::size_t channels, ChatTransport* transport);

// The escalation ladder applied to one term: the next forms to try after
// `source`, most conservative first. Exposed for tests.
std::vector<std::string> ladder_after(const std::string& source);

}  // namespace cosine
