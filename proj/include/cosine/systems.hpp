#pragma once

// Ground-truth graphs and the six benchmark dynamical systems.

#include "cosine/dataset.hpp"
#include "cosine/numeric.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace cosine {

enum class GraphFamily { ER, BA, WS };

struct GraphSpec {
  GraphFamily family = GraphFamily::ER;
  std::size_t nodes = 20;
  double p = 0.1;         // ER edge probability
  std::size_t m = 2;      // BA attachments per new node; seed clique has m + 1 nodes
  std::size_t k = 2;      // WS ring degree (even)
  double p_rewire = 0.1;  // WS
  std::uint64_t seed = 0;
};

struct Graph {
  std::size_t nodes = 0;
  std::vector<std::uint8_t> adj;  // symmetric, zero diagonal

  std::size_t edge_count() const;  // undirected edges
  std::size_t degree(std::size_t i) const;
  std::vector<std::size_t> isolated_nodes() const;
};

// Throws Error{InvalidSpec}.
Graph generate_graph(const GraphSpec& spec);

enum class SystemKind { MM, Diff, Spring, Kuramoto, FJ, CMN };

struct SystemSpec {
  SystemKind kind = SystemKind::Diff;
  double beta = 1.0;  // diffusion rate
  double k_spring = 0.1;
  double gamma = 0.0;
  double spring_v0_std = 0.0;  // initial velocities; positions are U(-1, 1)
  double kappa = 0.5;
  double omega_lo = 0.0;
  double omega_hi = 2.0;
  bool kuramoto_augmented = false;  // D = 3: (phase, sin, cos)
  bool shared_statics = false;      // one omega / s draw for the whole dataset
  double cmn_lambda = 3.5;
  double cmn_s = 0.2;
  double dt = 0.01;              // Euler step, continuous kinds only
  std::size_t sample_every = 10;  // Euler steps between frames
  std::size_t steps = 10;         // frames per trajectory (T)
  std::size_t trajectories = 50;  // B
};

std::string to_string(GraphFamily f);
std::string to_string(SystemKind k);
// Accepts the lowercase names used on the command line ("er", "diff", ...).
// Throws Error{InvalidSpec}.
GraphFamily parse_graph_family(const std::string& name);
SystemKind parse_system_kind(const std::string& name);

bool is_continuous(SystemKind k);
std::size_t state_channels(const SystemSpec& spec);
// Throws Error{InvalidSpec}.
void validate_spec(const SystemSpec& spec);

using Statics = std::map<std::string, std::vector<double>>;

// Per-node constants: "omega" (Kuramoto), "s" (FJ).
Statics draw_statics(const SystemSpec& spec, std::size_t nodes, Rng& rng);
// N x D initial state.
std::vector<double> draw_initial_state(const SystemSpec& spec, std::size_t nodes, Rng& rng);

// Runs one trajectory from x0 and returns spec.steps frames (T x N x D).
// Throws Error{NonFiniteState, ShapeMismatch}.
std::vector<double> simulate_trajectory(const SystemSpec& spec, const Graph& graph, const Statics& statics,
                                        const std::vector<double>& x0);

// Trajectory b draws its statics and then its initial state from
// derive_seed(seed, b), so every trajectory is reproducible on its own. With
// spec.shared_statics one draw from derive_seed(seed, ~0) serves all of them.
// Dataset statics hold B x N values (N when shared).
TrajectoryDataset simulate(const SystemSpec& spec, const Graph& graph, std::uint64_t seed,
                           const GraphSpec* graph_spec = nullptr);

// Total energy of a Spring frame (N x 4): kinetic plus spring potential.
double spring_energy(const SystemSpec& spec, const Graph& graph, const double* frame);

}  // namespace cosine
