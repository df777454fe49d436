#include "cosine/systems.hpp"

#include "cosine/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "json.hpp"

namespace cosine {

std::size_t Graph::edge_count() const {
  std::size_t c = 0;
  for (std::size_t i = 0; i < nodes; ++i)
    for (std::size_t j = i + 1; j < nodes; ++j) c += adj[i * nodes + j];
  return c;
}

std::size_t Graph::degree(std::size_t i) const {
  std::size_t d = 0;
  for (std::size_t j = 0; j < nodes; ++j) d += adj[i * nodes + j];
  return d;
}

std::vector<std::size_t> Graph::isolated_nodes() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes; ++i)
    if (degree(i) == 0) out.push_back(i);
  return out;
}

namespace {

void link(Graph& g, std::size_t i, std::size_t j, std::uint8_t v) {
  g.adj[i * g.nodes + j] = v;
  g.adj[j * g.nodes + i] = v;
}

void invalid(const std::string& what) { throw Error(ErrorCode::InvalidSpec, what); }

}  // namespace

Graph generate_graph(const GraphSpec& spec) {
  const std::size_t n = spec.nodes;
  if (n < 2) invalid("graph needs at least 2 nodes");
  Graph g;
  g.nodes = n;
  g.adj.assign(n * n, 0);
  Rng rng(derive_seed(spec.seed, 0x67726170));

  switch (spec.family) {
    case GraphFamily::ER:
      if (!(spec.p > 0.0 && spec.p < 1.0)) invalid("ER p must lie in (0, 1)");
      // One coin per unordered pair, used in both directions.
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
          if (uniform01(rng) < spec.p) link(g, i, j, 1);
      break;

    case GraphFamily::BA: {
      const std::size_t m = spec.m;
      if (m < 1 || m + 1 > n) invalid("BA needs 1 <= m < N");
      std::vector<std::size_t> ends;  // each node repeated once per incident edge
      for (std::size_t i = 0; i <= m; ++i)
        for (std::size_t j = i + 1; j <= m; ++j) {
          link(g, i, j, 1);
          ends.push_back(i);
          ends.push_back(j);
        }
      for (std::size_t v = m + 1; v < n; ++v) {
        std::set<std::size_t> targets;
        while (targets.size() < m) targets.insert(ends[uniform_index(rng, ends.size())]);
        for (std::size_t t : targets) {
          link(g, v, t, 1);
          ends.push_back(v);
          ends.push_back(t);
        }
      }
      break;
    }

    case GraphFamily::WS: {
      const std::size_t k = spec.k;
      if (k < 2 || k % 2 != 0 || k >= n) invalid("WS k must be even, >= 2 and < N");
      if (!(spec.p_rewire >= 0.0 && spec.p_rewire <= 1.0)) invalid("WS p_rewire must lie in [0, 1]");
      for (std::size_t u = 0; u < n; ++u)
        for (std::size_t l = 1; l <= k / 2; ++l) link(g, u, (u + l) % n, 1);
      // Rewire the far end of each lattice edge, keeping u attached.
      for (std::size_t l = 1; l <= k / 2; ++l)
        for (std::size_t u = 0; u < n; ++u) {
          if (!(uniform01(rng) < spec.p_rewire)) continue;
          const std::size_t v = (u + l) % n;
          if (!g.adj[u * n + v]) continue;
          std::vector<std::size_t> free;
          for (std::size_t w = 0; w < n; ++w)
            if (w != u && !g.adj[u * n + w]) free.push_back(w);
          if (free.empty()) continue;
          link(g, u, v, 0);
          link(g, u, free[uniform_index(rng, free.size())], 1);
        }
      break;
    }
  }
  return g;
}

std::string to_string(GraphFamily f) {
  switch (f) {
    case GraphFamily::ER: return "er";
    case GraphFamily::BA: return "ba";
    case GraphFamily::WS: return "ws";
  }
  return "?";
}

std::string to_string(SystemKind k) {
  switch (k) {
    case SystemKind::MM: return "mm";
    case SystemKind::Diff: return "diff";
    case SystemKind::Spring: return "spring";
    case SystemKind::Kuramoto: return "kuramoto";
    case SystemKind::FJ: return "fj";
    case SystemKind::CMN: return "cmn";
  }
  return "?";
}

GraphFamily parse_graph_family(const std::string& name) {
  for (auto f : {GraphFamily::ER, GraphFamily::BA, GraphFamily::WS})
    if (to_string(f) == name) return f;
  throw Error(ErrorCode::InvalidSpec, "unknown graph family '" + name + "'");
}

SystemKind parse_system_kind(const std::string& name) {
  for (auto k : {SystemKind::MM, SystemKind::Diff, SystemKind::Spring, SystemKind::Kuramoto, SystemKind::FJ,
                 SystemKind::CMN})
    if (to_string(k) == name) return k;
  throw Error(ErrorCode::InvalidSpec, "unknown system '" + name + "'");
}

bool is_continuous(SystemKind k) { return k != SystemKind::FJ && k != SystemKind::CMN; }

std::size_t state_channels(const SystemSpec& spec) {
  if (spec.kind == SystemKind::Spring) return 4;
  if (spec.kind == SystemKind::Kuramoto && spec.kuramoto_augmented) return 3;
  return 1;
}

void validate_spec(const SystemSpec& s) {
  const double params[] = {s.beta, s.k_spring, s.gamma, s.spring_v0_std, s.kappa,
                           s.omega_lo, s.omega_hi, s.cmn_lambda, s.cmn_s, s.dt};
  for (double v : params)
    if (!std::isfinite(v)) invalid("non-finite system parameter");
  if (is_continuous(s.kind) && !(s.dt > 0.0)) invalid("dt must be positive");
  if (s.sample_every < 1) invalid("sample_every must be >= 1");
  if (s.steps < 1 || s.trajectories < 1) invalid("need at least one trajectory and one frame");
  if (s.omega_hi < s.omega_lo) invalid("omega range is empty");
  if (s.spring_v0_std < 0.0) invalid("spring_v0_std must be >= 0");
  if (s.kind == SystemKind::CMN) {
    if (!(s.cmn_s >= 0.0 && s.cmn_s <= 1.0)) invalid("CMN s must lie in [0, 1]");
    if (!(s.cmn_lambda >= 0.0 && s.cmn_lambda <= 4.0)) invalid("CMN lambda must lie in [0, 4] to keep states in [0, 1]");
  }
}

Statics draw_statics(const SystemSpec& spec, std::size_t nodes, Rng& rng) {
  Statics st;
  if (spec.kind == SystemKind::Kuramoto) {
    auto& w = st["omega"];
    for (std::size_t i = 0; i < nodes; ++i) w.push_back(uniform(rng, spec.omega_lo, spec.omega_hi));
  } else if (spec.kind == SystemKind::FJ) {
    auto& s = st["s"];
    for (std::size_t i = 0; i < nodes; ++i) s.push_back(uniform(rng, -1.0, 1.0));
  }
  return st;
}

std::vector<double> draw_initial_state(const SystemSpec& spec, std::size_t nodes, Rng& rng) {
  const std::size_t D = state_channels(spec);
  std::vector<double> x(nodes * D, 0.0);
  for (std::size_t i = 0; i < nodes; ++i) {
    double* xi = x.data() + i * D;
    switch (spec.kind) {
      case SystemKind::MM: xi[0] = uniform(rng, 0.0, 2.0); break;
      case SystemKind::Diff:
      case SystemKind::FJ: xi[0] = uniform(rng, -1.0, 1.0); break;
      case SystemKind::CMN: xi[0] = uniform(rng, 0.0, 1.0); break;
      case SystemKind::Kuramoto: {
        const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        xi[0] = phi;
        if (D == 3) {
          xi[1] = std::sin(phi);
          xi[2] = std::cos(phi);
        }
        break;
      }
      case SystemKind::Spring:
        xi[0] = uniform(rng, -1.0, 1.0);
        xi[1] = uniform(rng, -1.0, 1.0);
        if (spec.spring_v0_std > 0.0) {
          xi[2] = normal(rng, 0.0, spec.spring_v0_std);
          xi[3] = normal(rng, 0.0, spec.spring_v0_std);
        }
        break;
    }
  }
  return x;
}

namespace {

// Internal state is what the dynamics act on: for augmented Kuramoto only the
// phase, otherwise the emitted channels themselves.
std::size_t internal_width(const SystemSpec& spec) { return spec.kind == SystemKind::Spring ? 4 : 1; }

void emit(const SystemSpec& spec, const std::vector<double>& s, std::size_t n, double* out) {
  const std::size_t D = state_channels(spec);
  const std::size_t W = internal_width(spec);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < W; ++c) out[i * D + c] = s[i * W + c];
    if (D == 3) {
      out[i * D + 1] = std::sin(s[i]);
      out[i * D + 2] = std::cos(s[i]);
    }
  }
}

const std::vector<double>& static_or_throw(const Statics& st, const char* name, std::size_t n) {
  auto it = st.find(name);
  if (it == st.end() || it->second.size() != n) {
    throw Error(ErrorCode::ShapeMismatch, std::string("missing per-node static '") + name + "'");
  }
  return it->second;
}

// dx/dt for the continuous kinds.
void derivative(const SystemSpec& spec, const Graph& g, const Statics& st, const std::vector<double>& x,
                std::vector<double>& dx) {
  const std::size_t n = g.nodes;
  const auto& A = g.adj;
  switch (spec.kind) {
    case SystemKind::MM:
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        std::size_t k = 0;
        for (std::size_t j = 0; j < n; ++j)
          if (A[i * n + j]) {
            acc += x[j] / (1.0 + x[j]);
            ++k;
          }
        dx[i] = -x[i] + (k ? acc / static_cast<double>(k) : 0.0);
      }
      break;
    case SystemKind::Diff:
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          if (A[i * n + j]) acc += x[j] - x[i];
        dx[i] = spec.beta * acc;
      }
      break;
    case SystemKind::Kuramoto: {
      const auto& omega = static_or_throw(st, "omega", n);
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          if (A[i * n + j]) acc += std::sin(x[j] - x[i]);
        dx[i] = omega[i] + spec.kappa * acc;
      }
      break;
    }
    case SystemKind::Spring:
      for (std::size_t i = 0; i < n; ++i) {
        const double* xi = x.data() + 4 * i;
        double fx = 0.0;
        double fy = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          if (A[i * n + j]) {
            fx += xi[0] - x[4 * j];
            fy += xi[1] - x[4 * j + 1];
          }
        double* d = dx.data() + 4 * i;
        d[0] = xi[2];
        d[1] = xi[3];
        d[2] = -spec.gamma * xi[2] - spec.k_spring * fx;
        d[3] = -spec.gamma * xi[3] - spec.k_spring * fy;
      }
      break;
    default:
      break;
  }
}

double logistic_map(double lambda, double v) { return lambda * v * (1.0 - v); }

void discrete_step(const SystemSpec& spec, const Graph& g, const Statics& st, std::vector<double>& x) {
  const std::size_t n = g.nodes;
  const auto& A = g.adj;
  std::vector<double> next(n);
  if (spec.kind == SystemKind::FJ) {
    // lambda_i / k_i = 1 / (k_i + 1) and 1 - lambda_i = 1 / (k_i + 1), so the
    // update is the mean of the neighbours and the innate opinion.
    const auto& s = static_or_throw(st, "s", n);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = s[i];
      std::size_t k = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (A[i * n + j]) {
          acc += x[j];
          ++k;
        }
      next[i] = acc / static_cast<double>(k + 1);
    }
  } else {
    std::vector<double> f(n);
    for (std::size_t i = 0; i < n; ++i) f[i] = logistic_map(spec.cmn_lambda, x[i]);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      std::size_t k = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (A[i * n + j]) {
          acc += f[j];
          ++k;
        }
      next[i] = k ? (1.0 - spec.cmn_s) * f[i] + (spec.cmn_s / static_cast<double>(k)) * acc : f[i];
    }
  }
  x.swap(next);
}

void check_finite(const std::vector<double>& x, std::size_t frame) {
  for (std::size_t k = 0; k < x.size(); ++k)
    if (!std::isfinite(x[k])) {
      throw Error(ErrorCode::NonFiniteState,
                  "state became non-finite at frame " + std::to_string(frame) + ", entry " + std::to_string(k));
    }
}

}  // namespace

std::vector<double> simulate_trajectory(const SystemSpec& spec, const Graph& graph, const Statics& statics,
                                        const std::vector<double>& x0) {
  validate_spec(spec);
  const std::size_t n = graph.nodes;
  const std::size_t D = state_channels(spec);
  const std::size_t W = internal_width(spec);
  if (graph.adj.size() != n * n) throw Error(ErrorCode::ShapeMismatch, "adjacency is not N x N");
  if (x0.size() != n * D) throw Error(ErrorCode::ShapeMismatch, "initial state is not N x D");

  std::vector<double> x(n * W);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < W; ++c) x[i * W + c] = x0[i * D + c];

  std::vector<double> out(spec.steps * n * D);
  std::vector<double> dx(n * W);
  for (std::size_t t = 0; t < spec.steps; ++t) {
    check_finite(x, t);
    emit(spec, x, n, out.data() + t * n * D);
    if (t + 1 == spec.steps) break;
    if (is_continuous(spec.kind)) {
      for (std::size_t s = 0; s < spec.sample_every; ++s) {
        derivative(spec, graph, statics, x, dx);
        for (std::size_t k = 0; k < x.size(); ++k) x[k] += spec.dt * dx[k];
      }
    } else {
      discrete_step(spec, graph, statics, x);
    }
  }
  return out;
}

TrajectoryDataset simulate(const SystemSpec& spec, const Graph& graph, std::uint64_t seed,
                           const GraphSpec* graph_spec) {
  validate_spec(spec);
  const std::size_t n = graph.nodes;
  TrajectoryDataset ds;
  ds.trajectories = spec.trajectories;
  ds.steps = spec.steps;
  ds.nodes = n;
  ds.channels = state_channels(spec);
  ds.adjacency = graph.adj;
  ds.seed = seed;
  ds.system = to_string(spec.kind);
  ds.dt = is_continuous(spec.kind) ? spec.dt * static_cast<double>(spec.sample_every) : 1.0;

  Statics shared;
  if (spec.shared_statics) {
    Rng static_rng(derive_seed(seed, ~0ULL));
    shared = draw_statics(spec, n, static_rng);
    ds.statics = shared;
  }
  ds.data.reserve(spec.trajectories * spec.steps * n * ds.channels);
  for (std::size_t b = 0; b < spec.trajectories; ++b) {
    Rng rng(derive_seed(seed, b));
    const Statics own = spec.shared_statics ? shared : draw_statics(spec, n, rng);
    if (!spec.shared_statics)
      for (const auto& [name, values] : own) {
        auto& all = ds.statics[name];
        all.insert(all.end(), values.begin(), values.end());
      }
    const auto traj = simulate_trajectory(spec, graph, own, draw_initial_state(spec, n, rng));
    ds.data.insert(ds.data.end(), traj.begin(), traj.end());
  }

  nlohmann::ordered_json prov;
  prov["system"] = {{"kind", to_string(spec.kind)},
                    {"beta", spec.beta},
                    {"k_spring", spec.k_spring},
                    {"gamma", spec.gamma},
                    {"spring_v0_std", spec.spring_v0_std},
                    {"kappa", spec.kappa},
                    {"omega_range", {spec.omega_lo, spec.omega_hi}},
                    {"kuramoto_augmented", spec.kuramoto_augmented},
                    {"shared_statics", spec.shared_statics},
                    {"cmn_lambda", spec.cmn_lambda},
                    {"cmn_s", spec.cmn_s},
                    {"dt", spec.dt},
                    {"sample_every", spec.sample_every},
                    {"steps", spec.steps},
                    {"trajectories", spec.trajectories}};
  if (graph_spec) {
    prov["graph"] = {{"family", to_string(graph_spec->family)}, {"nodes", graph_spec->nodes},
                     {"p", graph_spec->p},                      {"m", graph_spec->m},
                     {"k", graph_spec->k},                      {"p_rewire", graph_spec->p_rewire},
                     {"seed", graph_spec->seed}};
  }
  prov["isolated_nodes"] = graph.isolated_nodes();
  ds.provenance_json = prov.dump();
  return ds;
}

double spring_energy(const SystemSpec& spec, const Graph& g, const double* frame) {
  const std::size_t n = g.nodes;
  double kinetic = 0.0;
  double potential = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = frame + 4 * i;
    kinetic += 0.5 * (xi[2] * xi[2] + xi[3] * xi[3]);
    for (std::size_t j = i + 1; j < n; ++j)
      if (g.adj[i * n + j]) {
        const double dx = xi[0] - frame[4 * j];
        const double dy = xi[1] - frame[4 * j + 1];
        potential += 0.5 * spec.k_spring * (dx * dx + dy * dy);
      }
  }
  return kinetic + potential;
}

}  // namespace cosine
