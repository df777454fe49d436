#include "doctest.h"

#include "cosine/dataset.hpp"
#include "cosine/error.hpp"
#include "cosine/systems.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

using namespace cosine;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return ErrorCode::IoError;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cosine_test_systems_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Graph er(std::size_t n, double p, std::uint64_t seed) {
  GraphSpec gs;
  gs.nodes = n;
  gs.p = p;
  gs.seed = seed;
  return generate_graph(gs);
}

}  // namespace

TEST_CASE("ER edge counts follow the binomial") {
  const double pairs = 50.0 * 49.0 / 2.0;
  const double mean = 0.1 * pairs;
  const double sd = std::sqrt(pairs * 0.1 * 0.9);
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Graph g = er(50, 0.1, seed);
    const double c = static_cast<double>(g.edge_count());
    CHECK(std::fabs(c - mean) <= 5 * sd);
    total += c;
    for (std::size_t i = 0; i < 50; ++i) {
      CHECK(g.adj[i * 50 + i] == 0);
      for (std::size_t j = 0; j < 50; ++j) REQUIRE(g.adj[i * 50 + j] == g.adj[j * 50 + i]);
    }
  }
  CHECK(std::fabs(total / 100.0 - mean) <= 3 * sd / 10.0);
}

TEST_CASE("WS without rewiring is a ring") {
  GraphSpec gs;
  gs.family = GraphFamily::WS;
  gs.nodes = 50;
  gs.k = 2;
  gs.p_rewire = 0.0;
  const Graph g = generate_graph(gs);
  CHECK(g.edge_count() == 50);
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(g.degree(i) == 2);
    CHECK(g.adj[i * 50 + (i + 1) % 50] == 1);
  }
  gs.p_rewire = 0.1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    gs.seed = seed;
    const Graph r = generate_graph(gs);
    CHECK(r.edge_count() == 50);
    CHECK(r.isolated_nodes().empty());
  }
}

TEST_CASE("BA edge count is fixed by the seed clique") {
  GraphSpec gs;
  gs.family = GraphFamily::BA;
  gs.nodes = 50;
  gs.m = 2;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    gs.seed = seed;
    const Graph g = generate_graph(gs);
    CHECK(g.edge_count() == 3 + 2 * 47);
    CHECK(g.isolated_nodes().empty());
    for (std::size_t i = 0; i < 50; ++i) CHECK(g.degree(i) >= 2);
  }
}

TEST_CASE("invalid specs") {
  GraphSpec gs;
  gs.p = 1.0;
  CHECK(code_of([&] { generate_graph(gs); }) == ErrorCode::InvalidSpec);
  gs = GraphSpec{};
  gs.family = GraphFamily::WS;
  gs.k = 3;
  CHECK(code_of([&] { generate_graph(gs); }) == ErrorCode::InvalidSpec);
  gs = GraphSpec{};
  gs.family = GraphFamily::BA;
  gs.m = 0;
  CHECK(code_of([&] { generate_graph(gs); }) == ErrorCode::InvalidSpec);
  SystemSpec s;
  s.dt = 0.0;
  CHECK(code_of([&] { validate_spec(s); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([] { parse_system_kind("lorenz"); }) == ErrorCode::InvalidSpec);
  CHECK(parse_graph_family("ws") == GraphFamily::WS);
}

TEST_CASE("Kuramoto without coupling advances phases linearly") {
  SystemSpec s;
  s.kind = SystemKind::Kuramoto;
  s.kappa = 0.0;
  s.steps = 30;
  const Graph g = er(10, 0.5, 1);
  Rng rng(2);
  const Statics st = draw_statics(s, 10, rng);
  const auto x0 = draw_initial_state(s, 10, rng);
  const auto traj = simulate_trajectory(s, g, st, x0);
  const auto& omega = st.at("omega");
  for (std::size_t i = 0; i < 10; ++i) {
    double phi = x0[i];  // independent Euler iteration
    for (std::size_t t = 0; t < s.steps; ++t) {
      CHECK(traj[t * 10 + i] == phi);
      const double closed = x0[i] + omega[i] * s.dt * static_cast<double>(t * s.sample_every);
      CHECK(std::fabs(traj[t * 10 + i] - closed) <= 1e-12);
      for (std::size_t k = 0; k < s.sample_every; ++k) phi += s.dt * (omega[i] + 0.0);
    }
  }
}

TEST_CASE("diffusion conserves the total on undirected graphs") {
  SystemSpec s;
  s.kind = SystemKind::Diff;
  s.sample_every = 1;
  s.steps = 200;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Graph g = er(20, 0.2, seed);
    Rng rng(seed);
    const auto traj = simulate_trajectory(s, g, {}, draw_initial_state(s, 20, rng));
    for (std::size_t t = 1; t < s.steps; ++t) {
      double a = 0.0;
      double b = 0.0;
      for (std::size_t i = 0; i < 20; ++i) {
        a += traj[(t - 1) * 20 + i];
        b += traj[t * 20 + i];
      }
      REQUIRE(std::fabs(a - b) <= 1e-8);
    }
  }
}

TEST_CASE("FJ fixed point") {
  SystemSpec s;
  s.kind = SystemKind::FJ;
  s.steps = 25;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Graph g = er(15, 0.3, seed);
    Statics st;
    st["s"] = std::vector<double>(15, 0.5);
    const auto traj = simulate_trajectory(s, g, st, std::vector<double>(15, 0.5));
    for (double v : traj) REQUIRE(v == 0.5);

    // Starting anywhere on a connected graph, opinions converge to c.
    Rng rng(seed);
    const auto moving = simulate_trajectory(s, g, st, draw_initial_state(s, 15, rng));
    if (g.isolated_nodes().empty()) {
      for (std::size_t i = 0; i < 15; ++i) CHECK(std::fabs(moving[(s.steps - 1) * 15 + i] - 0.5) < 0.05);
    }
  }
}

TEST_CASE("CMN without coupling is the logistic map per node") {
  SystemSpec s;
  s.kind = SystemKind::CMN;
  s.cmn_s = 0.0;
  s.steps = 400;
  const Graph g = er(8, 0.5, 3);
  Rng rng(4);
  const auto x0 = draw_initial_state(s, 8, rng);
  const auto traj = simulate_trajectory(s, g, {}, x0);
  for (std::size_t i = 0; i < 8; ++i) {
    double v = x0[i];
    for (std::size_t t = 0; t < s.steps; ++t) {
      REQUIRE(traj[t * 8 + i] == v);
      if (t >= 200) {
        CHECK(v >= 0.38);
        CHECK(v <= 0.88);
      }
      v = 3.5 * v * (1.0 - v);
    }
  }
}

TEST_CASE("spring energy is conserved without damping") {
  SystemSpec s;
  s.kind = SystemKind::Spring;
  s.dt = 1e-3;
  s.spring_v0_std = 0.5;
  s.steps = 10;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Graph g = er(20, 0.2, seed);
    Rng rng(seed);
    const auto traj = simulate_trajectory(s, g, {}, draw_initial_state(s, 20, rng));
    const double e0 = spring_energy(s, g, traj.data());
    const double e1 = spring_energy(s, g, traj.data() + (s.steps - 1) * 80);
    CHECK(std::fabs(e1 - e0) / e0 <= 1e-3);
  }
}

TEST_CASE("isolated nodes use the self term only") {
  Graph g;
  g.nodes = 3;
  g.adj = {0, 1, 0, 1, 0, 0, 0, 0, 0};  // node 2 isolated
  SystemSpec s;
  s.kind = SystemKind::MM;
  s.sample_every = 1;
  s.steps = 2;
  const auto traj = simulate_trajectory(s, g, {}, {1.0, 1.0, 1.0});
  CHECK(traj[3 + 2] == 1.0 - s.dt);
  CHECK(traj[3 + 0] == 1.0 + s.dt * (-1.0 + 0.5));

  s.kind = SystemKind::FJ;
  Statics st;
  st["s"] = {0.0, 0.0, 0.25};
  const auto fj = simulate_trajectory(s, g, st, {1.0, 1.0, 1.0});
  CHECK(fj[3 + 2] == 0.25);
}

TEST_CASE("all systems stay finite at default volumes") {
  const SystemKind kinds[] = {SystemKind::MM, SystemKind::Diff, SystemKind::Spring,
                              SystemKind::Kuramoto, SystemKind::FJ, SystemKind::CMN};
  for (SystemKind kind : kinds) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      SystemSpec s;
      s.kind = kind;
      s.trajectories = 10;
      s.steps = 10;
      const Graph g = er(50, 0.1, seed);
      TrajectoryDataset ds;
      REQUIRE_NOTHROW(ds = simulate(s, g, seed));
      REQUIRE_NOTHROW(check_dataset(ds));
      if (kind == SystemKind::CMN) {
        for (double v : ds.data) REQUIRE((v >= 0.0 && v <= 1.0));
      }
    }
  }
}

TEST_CASE("simulation is deterministic and trajectories are independent streams") {
  SystemSpec s;
  s.kind = SystemKind::Kuramoto;
  s.trajectories = 4;
  const Graph g = er(12, 0.3, 9);
  const auto a = simulate(s, g, 77);
  const auto b = simulate(s, g, 77);
  CHECK(trajectories_csv(a) == trajectories_csv(b));
  s.trajectories = 2;
  const auto c = simulate(s, g, 77);
  for (std::size_t k = 0; k < c.data.size(); ++k) REQUIRE(c.data[k] == a.data[k]);
  CHECK(simulate(s, g, 78).data != c.data);
}

TEST_CASE("dataset save and load round-trip bit-exactly") {
  SystemSpec s;
  s.kind = SystemKind::Kuramoto;
  s.kuramoto_augmented = true;
  s.trajectories = 3;
  s.steps = 5;
  GraphSpec gs;
  gs.nodes = 6;
  gs.p = 0.4;
  const Graph g = generate_graph(gs);
  const auto ds = simulate(s, g, 5, &gs);
  const fs::path dir = scratch("roundtrip");
  save_dataset(ds, dir);
  const auto back = load_dataset(dir);
  CHECK(back.data == ds.data);
  CHECK(back.adjacency == ds.adjacency);
  CHECK(back.statics == ds.statics);
  CHECK(back.channels == 3);
  CHECK(back.dt == ds.dt);
  CHECK(back.system == "kuramoto");

  const fs::path dir2 = scratch("roundtrip2");
  save_dataset(back, dir2);
  CHECK(slurp(dir / "trajectories.csv") == slurp(dir2 / "trajectories.csv"));
  CHECK(slurp(dir / "meta.json") == slurp(dir2 / "meta.json"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("damaged dataset files are rejected") {
  SystemSpec s;
  s.trajectories = 2;
  s.steps = 4;
  const auto ds = simulate(s, er(5, 0.5, 1), 1);
  const fs::path dir = scratch("damaged");
  save_dataset(ds, dir);
  const std::string text = slurp(dir / "trajectories.csv");

  auto write = [&](const std::string& body) {
    std::ofstream out(dir / "trajectories.csv", std::ios::binary | std::ios::trunc);
    out << body;
  };
  write(text.substr(0, text.size() - 7));
  CHECK(code_of([&] { load_dataset(dir); }) == ErrorCode::FormatError);
  write(text.substr(0, text.rfind('\n', text.size() - 2) + 1));
  CHECK(code_of([&] { load_dataset(dir); }) == ErrorCode::FormatError);

  std::string edited = text;
  const auto pos = edited.rfind(',');
  edited.insert(pos + 1, "1");
  write(edited);
  CHECK(code_of([&] { load_dataset(dir); }) == ErrorCode::ChecksumMismatch);

  write(text);
  CHECK_NOTHROW(load_dataset(dir));
  fs::remove_all(dir);
}

TEST_CASE("external CSV loads without ground truth") {
  const fs::path dir = scratch("external");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "obs.csv");
    out << "traj,t,node,channel,value\n";
    for (int t = 0; t < 3; ++t)
      for (int n = 0; n < 2; ++n) out << "0," << t << "," << n << ",0," << (t + n) * 0.5 << "\n";
  }
  const auto ds = load_dataset(dir / "obs.csv");
  CHECK(ds.trajectories == 1);
  CHECK(ds.steps == 3);
  CHECK(ds.nodes == 2);
  CHECK_FALSE(ds.adjacency.has_value());
  CHECK(ds.frame(0, 2)[1] == 1.5);
  fs::remove_all(dir);
}
