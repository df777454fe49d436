#pragma once

// Run configuration: one JSON document with dataset, train, evolve and eval
// sections plus output directory and global seed. Unknown keys are errors.

#include "cosine/dynmodel.hpp"
#include "cosine/evolve.hpp"
#include "cosine/proposer.hpp"
#include "cosine/systems.hpp"

#include <cstdint>
#include <string>

namespace cosine {

struct DatasetSection {
  std::string path;  // existing dataset directory or CSV; empty = simulate
  GraphSpec graph;
  SystemSpec system;
};

struct EvolveSection {
  ProposerConfig proposer;
  std::size_t rounds = 10;
  std::size_t patience = 3;
  std::string initial_library;  // library JSON file for round 0; empty = proposer decides
};

struct EvalSection {
  std::size_t k = 3;
  std::string primitives;  // primitives JSON file; empty = built-in table
};

struct RunConfig {
  DatasetSection dataset;
  TrainConfig train;
  EvolveSection evolve;
  EvalSection eval;
  std::string library;  // library JSON for `train`; empty = seed library
  std::string output = "cosine_out";
  std::uint64_t seed = 0;
};

// Trajectories x frames used for each system unless overridden.
void apply_default_volume(SystemSpec& spec);

// Throws Error{ConfigError} on malformed JSON, wrong types, bad values or
// unknown keys.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::string& path);
// Every key spelled out; parse_run_config(run_config_json(c)) reproduces c.
std::string run_config_json(const RunConfig& cfg);

// Pushes the global seed into the graph, simulator and trainer.
void apply_seed(RunConfig& cfg, std::uint64_t seed);

// Throws Error{IoError} when a referenced input file does not exist.
void check_inputs(const RunConfig& cfg, bool needs_dataset_path = false);

}  // namespace cosine
