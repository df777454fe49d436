#include "doctest.h"

#include "cosine/cli.hpp"
#include "cosine/config.hpp"
#include "cosine/error.hpp"

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

using namespace cosine;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cosine_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Small and quick: 8 nodes, 6 short trajectories, few epochs.
fs::path small_config(const fs::path& dir, const std::string& extra = "") {
  const auto path = dir / "config.json";
  write_text_file(path, R"({"dataset": {"graph": {"nodes": 8, "p": 0.3},
                                        "system": {"kind": "diff", "trajectories": 6, "steps": 6}},
                            "train": {"epochs": 20})" +
                            extra + "}");
  return path;
}

ErrorCode config_error(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("accepted: " << text);
  return ErrorCode::IoError;
}

}  // namespace

TEST_CASE("config defaults and per-system volumes") {
  auto c = parse_run_config("{}");
  CHECK(c.dataset.system.kind == SystemKind::Diff);
  CHECK(c.dataset.system.trajectories == 50);
  CHECK(c.dataset.system.steps == 10);
  CHECK(c.eval.k == 3);
  CHECK(c.evolve.rounds == 10);
  CHECK(c.evolve.patience == 3);

  c = parse_run_config(R"({"dataset": {"system": {"kind": "spring"}}})");
  CHECK(c.dataset.system.trajectories == 15);
  CHECK(c.dataset.system.steps == 10);
  c = parse_run_config(R"({"dataset": {"system": {"kind": "kuramoto"}}})");
  CHECK(c.dataset.system.trajectories == 30);
  CHECK(c.dataset.system.steps == 30);
  c = parse_run_config(R"({"dataset": {"system": {"steps": 7, "kind": "fj"}}})");
  CHECK(c.dataset.system.trajectories == 20);
  CHECK(c.dataset.system.steps == 7);

  c = parse_run_config(R"({"seed": 9})");
  CHECK(c.dataset.graph.seed == 9);
  CHECK(c.train.seed == 9);
}

TEST_CASE("config rejects unknown keys and bad values") {
  CHECK(config_error(R"({"bogus": 1})") == ErrorCode::ConfigError);
  CHECK(config_error(R"({"train": {"epoch": 5}})") == ErrorCode::ConfigError);
  CHECK(config_error(R"({"dataset": {"graph": {"size": 5}}})") == ErrorCode::ConfigError);
  CHECK(config_error(R"({"evolve": {"llm": {"key": "x"}}})") == ErrorCode::ConfigError);
  CHECK(config_error(R"({"train": {"epochs": -1}})") == ErrorCode::ConfigError);
  CHECK(config_error(R"({"train": {"tau": "hot"}})") == ErrorCode::ConfigError);
  CHECK(config_error(R"({"train": {"tau": 0}})") == ErrorCode::ConfigError);
  CHECK(config_error(R"({"train": 3})") == ErrorCode::ConfigError);
  CHECK(config_error(R"({"dataset": {"system": {"kind": "lorenz"}}})") == ErrorCode::ConfigError);
  CHECK(config_error(R"({"evolve": {"proposer": "mcts"}})") == ErrorCode::ConfigError);
  CHECK(config_error(R"({"eval": {"k": 0}})") == ErrorCode::ConfigError);
  CHECK(config_error("{") == ErrorCode::ConfigError);
}

TEST_CASE("config round-trips through its JSON form") {
  auto c = parse_run_config(R"({"dataset": {"graph": {"family": "ws", "k": 4}, "system": {"kind": "cmn"}},
                                "train": {"sigma": 0.5, "warm_start": false},
                                "evolve": {"proposer": "llm", "llm": {"endpoint": "http://h/x", "retries": 4}},
                                "eval": {"k": 5}, "seed": 77, "output": "somewhere"})");
  const auto text = run_config_json(c);
  CHECK(run_config_json(parse_run_config(text)) == text);
  const auto j = nlohmann::json::parse(text);
  CHECK(j["dataset"]["graph"]["family"] == "ws");
  CHECK(j["evolve"]["llm"]["retries"] == 4);
  CHECK(j["seed"] == 77);
}

TEST_CASE("config inputs must exist") {
  auto c = parse_run_config(R"({"library": "/nonexistent/lib.json"})");
  CHECK_THROWS_AS(check_inputs(c), Error);
  c = parse_run_config("{}");
  CHECK_NOTHROW(check_inputs(c));
  CHECK_THROWS_AS(check_inputs(c, true), Error);
}

TEST_CASE("help and usage errors") {
  auto r = cli({"--help"});
  CHECK(r.code == 0);
  for (const char* verb : {"gen-data", "train", "evolve", "eval", "sweep"}) CHECK(r.out.find(verb) != std::string::npos);
  r = cli({"train", "--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("--epochs") != std::string::npos);
  CHECK(cli({"train", "--no-such-flag"}).code == 2);
  CHECK(cli({"fly"}).code == 2);
  CHECK(cli({}).code == 2);
}

TEST_CASE("gen-data volumes and directories") {
  const auto dir = scratch("gen");
  auto r = cli({"gen-data", "--system", "spring", "--nodes", "10", "--seed", "4", "--out", (dir / "a" / "b").string()});
  REQUIRE(r.code == 0);
  auto ds = load_dataset(dir / "a" / "b");
  CHECK(ds.trajectories == 15);
  CHECK(ds.steps == 10);
  CHECK(ds.channels == 4);
  r = cli({"gen-data", "--system", "kuramoto", "--nodes", "6", "--out", (dir / "k").string()});
  REQUIRE(r.code == 0);
  ds = load_dataset(dir / "k");
  CHECK(ds.trajectories == 30);
  CHECK(ds.steps == 30);

  // same seed, same bytes
  REQUIRE(cli({"gen-data", "--system", "spring", "--nodes", "10", "--seed", "4", "--out", (dir / "c").string()}).code == 0);
  CHECK(read_text_file(dir / "a" / "b" / "trajectories.csv") == read_text_file(dir / "c" / "trajectories.csv"));
  CHECK(read_text_file(dir / "a" / "b" / "meta.json") == read_text_file(dir / "c" / "meta.json"));
}

TEST_CASE("train writes a checkpoint and honours the seed") {
  const auto dir = scratch("train");
  const auto cfg = small_config(dir).string();
  auto r = cli({"train", "--config", cfg, "--seed", "3", "--out", (dir / "a").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("auc=") != std::string::npos);
  for (const char* f : {"checkpoint.json", "loss_curve.csv", "edges.csv", "auc.txt", "terms.csv", "config.json"})
    CHECK(fs::exists(dir / "a" / f));
  REQUIRE(cli({"train", "--config", cfg, "--seed", "3", "--out", (dir / "b").string()}).code == 0);
  CHECK(read_text_file(dir / "a" / "checkpoint.json") == read_text_file(dir / "b" / "checkpoint.json"));
  CHECK(read_text_file(dir / "a" / "edges.csv") == read_text_file(dir / "b" / "edges.csv"));

  r = cli({"train", "--config", cfg, "--epochs", "0", "--out", (dir / "zero").string()});
  REQUIRE(r.code == 0);
  CHECK(lines(read_text_file(dir / "zero" / "loss_curve.csv")) == 2);  // header and epoch 0
}

TEST_CASE("corrupt dataset is a runtime error") {
  const auto dir = scratch("corrupt");
  REQUIRE(cli({"gen-data", "--config", small_config(dir).string(), "--out", (dir / "ds").string()}).code == 0);
  auto text = read_text_file(dir / "ds" / "trajectories.csv");
  text.replace(text.size() / 2, 6, "x,y;z!");
  write_text_file(dir / "ds" / "trajectories.csv", text);
  const auto r = cli({"train", "--data", (dir / "ds").string(), "--out", (dir / "out").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("error:") != std::string::npos);
}

TEST_CASE("evolve with the heuristic persists every round") {
  const auto dir = scratch("evolve");
  const auto r = cli({"evolve", "--config", small_config(dir).string(), "--rounds", "2", "--out", (dir / "run").string()});
  REQUIRE(r.code == 0);
  CHECK(lines(read_text_file(dir / "run" / "rounds.csv")) == 3);
  const auto rep = nlohmann::json::parse(read_text_file(dir / "run" / "report.json"));
  CHECK(rep["rounds"].size() == 2);
  CHECK(r.out.find("round 1 [heuristic]") != std::string::npos);
}

TEST_CASE("llm proposer needs its token") {
  const auto dir = scratch("token");
  ::unsetenv("COSINE_TEST_MISSING_TOKEN");
  const auto cfg = small_config(dir, R"(, "evolve": {"proposer": "llm", "llm": {"token_env": "COSINE_TEST_MISSING_TOKEN"}})");
  const auto r = cli({"evolve", "--config", cfg.string(), "--endpoint", "http://127.0.0.1:9/v1/chat/completions",
                      "--out", (dir / "run").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("COSINE_TEST_MISSING_TOKEN") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "run" / "report.json"));
}

TEST_CASE("llm proposer against a mock server, then replayed offline") {
  const char* reply =
      R"J({"message_terms":[{"name":"diff","expr":"xj - xi","type":"vector"},{"name":"sin","expr":"torch.sin(diff)","type":"vector"}],"update_terms":[{"name":"h","expr":"h","type":"vector"}]})J";
  const char* second =
      R"J({"message_terms":[{"name":"sin","expr":"torch.sin(diff)","type":"vector"}],"update_terms":[{"name":"h","expr":"h","type":"vector"},{"name":"x","expr":"x","type":"vector"}]})J";
  httplib::Server server;
  int calls = 0;
  server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& rs) {
    const std::string content = calls++ == 0 ? reply : second;
    nlohmann::json body = {{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
    rs.set_content(body.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  const auto dir = scratch("mock");
  ::setenv("COSINE_TEST_TOKEN", "abc", 1);
  const auto cfg = small_config(dir, R"(, "evolve": {"proposer": "llm", "llm": {"token_env": "COSINE_TEST_TOKEN"}})");
  const std::string endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  auto live = cli({"evolve", "--config", cfg.string(), "--endpoint", endpoint, "--rounds", "2", "--out",
                   (dir / "live").string()});
  server.stop();
  th.join();
  REQUIRE(live.code == 0);
  CHECK(calls == 2);
  CHECK(fs::exists(dir / "live" / "transcripts" / "round_000.json"));
  CHECK(fs::exists(dir / "live" / "transcripts" / "round_001.json"));

  auto replay = cli({"evolve", "--config", cfg.string(), "--replay", (dir / "live" / "transcripts").string(),
                     "--rounds", "2", "--out", (dir / "replay").string()});
  REQUIRE(replay.code == 0);
  for (const char* f : {"rounds.csv", "edges.csv", "terms.csv", "transcripts/round_000.json", "transcripts/round_001.json"}) {
    INFO(f);
    CHECK(read_text_file(dir / "live" / f) == read_text_file(dir / "replay" / f));
  }
}

TEST_CASE("eval on datasets with and without a ground-truth graph") {
  const auto dir = scratch("eval");
  const auto cfg = small_config(dir).string();
  REQUIRE(cli({"gen-data", "--config", cfg, "--out", (dir / "ds").string()}).code == 0);
  REQUIRE(cli({"train", "--config", cfg, "--data", (dir / "ds").string(), "--out", (dir / "run").string()}).code == 0);

  auto r = cli({"eval", "--checkpoint", (dir / "run").string(), "--data", (dir / "ds").string(), "--out",
                (dir / "ev").string()});
  REQUIRE(r.code == 0);
  double a = -1;
  const auto auc_text = read_text_file(dir / "ev" / "auc.txt");
  REQUIRE(parse_double(auc_text.substr(0, auc_text.size() - 1), a));
  CHECK(a >= 0.0);
  CHECK(a <= 1.0);
  CHECK(read_text_file(dir / "ev" / "edges.csv") == read_text_file(dir / "run" / "edges.csv"));

  // bare trajectory CSV: no adjacency
  const auto ds = load_dataset(dir / "ds");
  write_text_file(dir / "bare.csv", trajectories_csv(ds));
  r = cli({"eval", "--checkpoint", (dir / "run" / "checkpoint.json").string(), "--data", (dir / "bare.csv").string(),
           "--system", "diff", "--out", (dir / "ev2").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("notice") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "ev2" / "auc.txt"));
  CHECK(r.out.find("term_accuracy") != std::string::npos);
  r = cli({"eval", "--checkpoint", (dir / "run").string(), "--data", (dir / "bare.csv").string(), "--metric", "auc",
           "--out", (dir / "ev3").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("MissingGroundTruth") != std::string::npos);

  // K decides how deep the ranking is searched: the weaker product term only counts at K = 2
  write_text_file(dir / "prims.json", R"({"diff": {"message": ["xi * xj"], "update": []}})");
  const auto prims = (dir / "prims.json").string();
  r = cli({"eval", "--checkpoint", (dir / "run").string(), "--data", (dir / "ds").string(), "--primitives", prims,
           "--k", "1", "--out", (dir / "k1").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("message=0 ") != std::string::npos);
  r = cli({"eval", "--checkpoint", (dir / "run").string(), "--data", (dir / "ds").string(), "--primitives", prims,
           "--k", "2", "--out", (dir / "k2").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("message=1 ") != std::string::npos);
}

TEST_CASE("sweep output does not depend on the number of jobs") {
  const auto dir = scratch("sweep");
  const auto cfg = small_config(dir).string();
  const std::vector<std::string> base{"sweep", "--config", cfg, "--systems", "diff,fj", "--graphs", "er,ba",
                                      "--seeds", "1,2", "--nodes", "8", "--trajectories", "6", "--steps", "6"};
  auto a = base, b = base;
  a.insert(a.end(), {"--jobs", "1", "--out", (dir / "a").string()});
  b.insert(b.end(), {"--jobs", "3", "--out", (dir / "b").string()});
  REQUIRE(cli(a).code == 0);
  REQUIRE(cli(b).code == 0);
  CHECK(read_text_file(dir / "a" / "sweep.csv") == read_text_file(dir / "b" / "sweep.csv"));
  CHECK(read_text_file(dir / "a" / "runs.csv") == read_text_file(dir / "b" / "runs.csv"));
  const auto summary = read_text_file(dir / "a" / "sweep.csv");
  CHECK(lines(summary) == 5);
  CHECK(summary.rfind("system,graph,nodes,volume,runs,failed,auc_mean,auc_std\n", 0) == 0);
  CHECK(lines(read_text_file(dir / "a" / "runs.csv")) == 9);
}

TEST_CASE("sweep summary statistics") {
  std::vector<SweepRow> rows(3);
  for (std::size_t i = 0; i < 3; ++i) {
    rows[i].system = "diff";
    rows[i].graph = "er";
    rows[i].nodes = 20;
    rows[i].volume = "50x10";
    rows[i].seed = i;
    rows[i].ok = true;
  }
  rows[0].auc = 0.5;
  rows[1].auc = 1.0;
  rows[2].ok = false;
  rows[2].error = "boom, twice";
  CHECK(sweep_summary_csv(rows) ==
        "system,graph,nodes,volume,runs,failed,auc_mean,auc_std\ndiff,er,20,50x10,2,1,0.75,0.3535533905932738\n");
  CHECK(sweep_runs_csv(rows).find("\"boom, twice\"") != std::string::npos);
}
