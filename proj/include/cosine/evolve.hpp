#pragma once

// The outer loop: propose a library, train it, keep it only when the
// validation nll strictly improves, stop after `patience` rejections in a row.
// Also the run report written to an output directory.

#include "cosine/dataset.hpp"
#include "cosine/dynmodel.hpp"
#include "cosine/metrics.hpp"
#include "cosine/proposer.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cosine {

struct OuterConfig {
  std::size_t rounds = 10;   // R
  std::size_t patience = 3;  // rejected rounds in a row before stopping
  std::optional<BasisLibrary> initial;  // round 0 library; otherwise the proposer's first call
};

// Throws Error{ConfigError}.
void validate_outer(const OuterConfig& cfg);

struct FinalReport {
  SearchState state;
  TrainConfig train;
  std::size_t nodes = 0, channels = 0;
  // Per round, possibly empty. May hold one entry more than the history when
  // the last proposal repeated the incumbent and was not trained.
  std::vector<std::vector<Exchange>> transcripts;
  std::vector<std::vector<std::string>> notes;
  std::string stop_reason;

  const RoundRecord& best() const { return *state.best_record(); }
  const TrainResult& best_result() const { return *state.best_result; }
};

using RoundCallback = std::function<void(const RoundRecord&, const std::vector<std::string>& notes)>;

// Throws Error{ProposerUnavailable, EmptyDataset, ...}; Error{DivergedLoss}
// only when no round at all trained successfully.
FinalReport run_outer(const TrajectoryDataset& data, const TrainConfig& train, const ProposerConfig& proposer,
                      const OuterConfig& outer, ChatTransport* transport = nullptr, const RoundCallback& on_round = {});

// Scores and metrics of one trained state against an optional ground truth.
struct Evaluation {
  std::vector<double> scores;  // N x N edge probabilities
  std::optional<double> auc;
  std::optional<TermAccuracy> term_accuracy;
  std::vector<TermRow> terms;  // message rows then update rows, each by mean|w| descending
};

// `truth` may be null (no AUC); `required` may be null (no term accuracy).
Evaluation evaluate_state(const ModelState& state, double tau, const std::vector<std::uint8_t>* truth,
                          const Primitives* required, std::size_t k, std::size_t round);

std::string rounds_csv(const std::vector<RoundRecord>& history);

// Writes edges.csv, auc.txt (with ground truth), terms.csv, rounds.csv,
// loss_curve.csv, library.json, checkpoint.json, report.json and
// transcripts/round_NNN.json. Output is a pure function of the arguments.
// Throws Error{IoError}.
void write_report(const FinalReport& report, const TrajectoryDataset& data, const Primitives* required, std::size_t k,
                  const std::filesystem::path& dir);

// Small helper shared with the command-line front end. Throws Error{IoError}.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace cosine
