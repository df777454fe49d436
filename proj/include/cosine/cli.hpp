#pragma once

// Command-line front end: gen-data, train, evolve, eval, sweep.

#include "cosine/config.hpp"
#include "cosine/dataset.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace cosine {

// `args` excludes the program name. Returns the process exit code: 0 when the
// command completed, 1 on a runtime error, 2 on a usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Loads cfg.dataset.path, or simulates the configured graph and system.
TrajectoryDataset obtain_dataset(const RunConfig& cfg);

struct SweepRow {
  std::string system, graph;
  std::size_t nodes = 0;
  std::string volume;  // trajectories x frames
  std::uint64_t seed = 0;
  bool ok = false;
  double auc = 0.0;
  double val_nll = 0.0;
  std::string error;
};

struct SweepSpec {
  std::vector<std::string> systems;
  std::vector<std::string> graphs;
  std::vector<std::uint64_t> seeds;
  bool evolve = false;  // heuristic outer loop instead of one training run
  std::size_t jobs = 1;
  std::size_t trajectories = 0, steps = 0;  // 0 keeps each system's default volume
};

// Rows come back in grid order (system, graph, seed) whatever `jobs` is.
std::vector<SweepRow> run_sweep(const RunConfig& base, const SweepSpec& spec);
// Per-run table and the aggregated mean/std table.
std::string sweep_runs_csv(const std::vector<SweepRow>& rows);
std::string sweep_summary_csv(const std::vector<SweepRow>& rows);

}  // namespace cosine
