#include "doctest.h"

#include "cosine/chat_client.hpp"
#include "cosine/error.hpp"
#include "cosine/proposer.hpp"
#include "cosine/resources.hpp"

#include <atomic>
#include <thread>

#include "httplib.h"
#include "json.hpp"

using namespace cosine;

namespace {

const char* kMinimal =
    R"({"message_terms":[{"name":"diff","expr":"xj - xi","type":"vector"}],"update_terms":[{"name":"h","expr":"h","type":"vector"}]})";

BasisLibrary lib_of(const std::vector<std::pair<std::string, std::string>>& msg,
                    const std::vector<std::pair<std::string, std::string>>& upd, std::size_t D = 1) {
  BasisLibrary lib;
  for (const auto& [n, s] : msg) lib.message_terms.push_back(make_term(n, s, TermKind::Vector, Stream::Message, D));
  for (const auto& [n, s] : upd) lib.update_terms.push_back(make_term(n, s, TermKind::Vector, Stream::Update, D));
  return lib;
}

RoundRecord record(std::size_t round, const BasisLibrary& lib, double nll, const std::vector<double>& w_msg,
                   const std::vector<double>& w_upd) {
  RoundRecord r;
  r.round = round;
  r.library = lib;
  r.val_nll = nll;
  r.val_total = nll;
  r.digest = make_digest(round, nll, lib, w_msg, w_upd, 1);
  return r;
}

bool has_equivalent(const std::vector<BasisTerm>& terms, const std::string& src) {
  const auto want = expr::Expr::parse(src);
  for (const auto& t : terms)
    if (expr::equivalent(t.expr, want, 1)) return true;
  return false;
}

class ScriptedTransport : public ChatTransport {
public:
  std::vector<std::string> replies;
  std::vector<ChatRequest> seen;
  bool offline = false;
  std::string send(const ChatRequest& req) override {
    seen.push_back(req);
    if (offline || seen.size() > replies.size()) throw Error(ErrorCode::ProposerUnavailable, "offline");
    return replies[seen.size() - 1];
  }
};

}  // namespace

TEST_CASE("acceptance is strict") {
  SearchState st;
  const auto lib = lib_of({{"diff", "xj - xi"}}, {{"h", "h"}});
  CHECK(accept_if_better(st, record(0, lib, 0.50, {1.0}, {1.0}), std::nullopt));
  CHECK(st.best_loss() == 0.50);
  CHECK(accept_if_better(st, record(1, lib, 0.49, {1.0}, {1.0}), std::nullopt));
  CHECK(st.best_loss() == 0.49);
  CHECK(*st.best == 1);
  CHECK_FALSE(accept_if_better(st, record(2, lib, 0.49, {1.0}, {1.0}), std::nullopt));
  auto failed = record(3, lib, 0.1, {1.0}, {1.0});
  failed.failed = true;
  failed.failure = "diverged";
  CHECK_FALSE(accept_if_better(st, failed, std::nullopt));
  auto nan = record(4, lib, std::nan(""), {1.0}, {1.0});
  CHECK_FALSE(accept_if_better(st, nan, std::nullopt));
  CHECK(st.history.size() == 5);
  CHECK(st.best_loss() == 0.49);
  CHECK(st.history[3].failed);
}

TEST_CASE("escalation ladder") {
  auto l = ladder_after("xj - xi");
  REQUIRE(l.size() == 4);
  CHECK(expr::equivalent(expr::Expr::parse(l[0]), expr::Expr::parse("diff * diff"), 1));
  CHECK(expr::equivalent(expr::Expr::parse(l[1]), expr::Expr::parse("torch.sin(diff)"), 1));
  CHECK(expr::equivalent(expr::Expr::parse(l[2]), expr::Expr::parse("torch.tanh(diff)"), 1));
  CHECK(expr::equivalent(expr::Expr::parse(l[3]), expr::Expr::parse("diff / (1 + torch.abs(diff))"), 1));
  CHECK(ladder_after("torch.pow(diff, 2)").size() == 3);
  CHECK(ladder_after("(xj - xi) * (xj - xi)").size() == 3);
  CHECK(ladder_after("torch.sin(xj)").size() == 1);
  CHECK(ladder_after("xj / (1 + torch.abs(xj))").empty());
}

TEST_CASE("heuristic: empty history gives the seed library") {
  ProposerConfig cfg;
  auto p = heuristic_propose(SearchState{}, 2, cfg);
  CHECK(p.library == seed_library(2));
}

TEST_CASE("heuristic: diff reaches sin(diff) within three rounds") {
  ProposerConfig cfg;
  SearchState st;
  const auto start = lib_of({{"diff", "xj - xi"}}, {{"x", "x"}, {"h", "h"}, {"hdeg", "h / (deg + 1e-6)"}});
  accept_if_better(st, record(0, start, 1.0, {0.5}, {0.1, 0.2, 0.3}), std::nullopt);
  bool found = false;
  std::vector<std::string> trace;
  for (int r = 1; r <= 3 && !found; ++r) {
    auto p = heuristic_propose(st, 1, cfg);
    trace.push_back(p.library.message_terms.back().expr.to_string());
    found = has_equivalent(p.library.message_terms, "torch.sin(xj - xi)");
    // the candidate does not beat the incumbent
    std::vector<double> w(p.library.message_terms.size(), 0.1);
    accept_if_better(st, record(static_cast<std::size_t>(r), p.library, 1.0, w, {0.1, 0.2, 0.3}), std::nullopt);
  }
  CHECK(found);
  REQUIRE(trace.size() == 2);
  CHECK(expr::equivalent(expr::Expr::parse(trace[0]), expr::Expr::parse("diff * diff"), 1));
}

TEST_CASE("heuristic: negligible terms are pruned") {
  ProposerConfig cfg;
  SearchState st;
  const auto lib = lib_of({{"diff", "xj - xi"}, {"prod", "xi * xj"}}, {{"x", "x"}, {"h", "h"}});
  accept_if_better(st, record(0, lib, 1.0, {0.5, 1e-6}, {0.2, 0.3}), std::nullopt);
  auto p = heuristic_propose(st, 1, cfg);
  REQUIRE(p.library.message_terms.size() == 1);
  CHECK(p.library.message_terms[0].name == "diff");
  CHECK(p.library.update_terms.size() == 2);
}

TEST_CASE("heuristic: pruning never empties a stream") {
  ProposerConfig cfg;
  cfg.heuristic.prune_threshold = 2.0;  // above every term, including the strongest
  SearchState st;
  const auto lib = lib_of({{"a", "xj"}, {"b", "xi"}}, {{"h", "h"}});
  accept_if_better(st, record(0, lib, 1.0, {0.1, 0.3}, {0.2}), std::nullopt);
  auto p = heuristic_propose(st, 1, cfg);
  CHECK(p.library.message_terms.size() == 1);
  CHECK(p.library.message_terms[0].name == "b");
  CHECK(p.library.update_terms.size() == 1);
}

TEST_CASE("heuristic: full budget replaces the weakest term") {
  ProposerConfig cfg;
  cfg.max_terms = 2;
  SearchState st;
  const auto lib = lib_of({{"diff", "xj - xi"}, {"xj", "xj"}}, {{"h", "h"}, {"hdeg", "h / (deg + 1e-6)"}});
  accept_if_better(st, record(0, lib, 1.0, {0.5, 0.01}, {0.2, 0.3}), std::nullopt);
  auto p = heuristic_propose(st, 1, cfg);
  REQUIRE(p.library.message_terms.size() == 2);
  CHECK(p.library.message_terms[0].name == "diff");
  CHECK(has_equivalent(p.library.message_terms, "xj * xj"));
}

TEST_CASE("heuristic: offers the degree-normalized update") {
  ProposerConfig cfg;
  SearchState st;
  const auto lib = lib_of({{"diff", "xj - xi"}}, {{"h", "h"}});
  accept_if_better(st, record(0, lib, 1.0, {0.5}, {0.3}), std::nullopt);
  auto p = heuristic_propose(st, 1, cfg);
  CHECK(has_equivalent(p.library.update_terms, "h / (deg + 1e-6)"));
}

TEST_CASE("heuristic: pure function of its inputs") {
  ProposerConfig cfg;
  SearchState st;
  const auto lib = seed_library(1);
  accept_if_better(st, record(0, lib, 1.0, {0.3, 0.2}, {0.1, 0.2, 0.3}), std::nullopt);
  accept_if_better(st, record(1, lib, 0.999, {0.3, 0.2}, {0.1, 0.2, 0.3}), std::nullopt);
  auto a = heuristic_propose(st, 1, cfg);
  auto b = heuristic_propose(st, 1, cfg);
  CHECK(a.library == b.library);
  CHECK(a.notes == b.notes);
}

TEST_CASE("heuristic: exhausted ladders leave the library unchanged") {
  ProposerConfig cfg;
  cfg.max_terms = 1;
  SearchState st;
  const auto lib = lib_of({{"s", "xj / (1 + torch.abs(xj))"}}, {{"u", "h / (1 + torch.abs(h))"}});
  accept_if_better(st, record(0, lib, 1.0, {0.5}, {0.5}), std::nullopt);
  auto p = heuristic_propose(st, 1, cfg);
  CHECK(p.library == lib);
  CHECK(p.notes.back() == "ladders exhausted: no edit left");
}

TEST_CASE("dedup collapses equivalent terms") {
  const auto lib = lib_of({{"a", "xj - xi"}, {"b", "-2 * (xi - xj)"}, {"c", "xi"}}, {{"h", "h"}, {"h2", "3 * h"}});
  std::vector<std::string> notes;
  auto d = dedup_library(lib, 1, &notes);
  CHECK(d.message_terms.size() == 2);
  CHECK(d.update_terms.size() == 1);
  CHECK(notes.size() == 2);
}

TEST_CASE("templates") {
  CHECK(render_template("a {x} b {y} {x}", {{"x", "1"}}) == "a 1 b {y} 1");
  CHECK(render_template("{unclosed", {{"unclosed", "z"}}) == "{unclosed");
  ProposerConfig cfg;
  cfg.description = "coupled oscillators";
  const auto init = render_init_prompt(cfg, 3);
  CHECK(init.find("{feature_dim}") == std::string::npos);
  CHECK(init.find("coupled oscillators") != std::string::npos);
  CHECK(init.find("3") != std::string::npos);

  SearchState st;
  const auto lib = lib_of({{"diff", "xj - xi"}}, {{"h", "h"}});
  for (int r = 0; r < 5; ++r)
    accept_if_better(st, record(static_cast<std::size_t>(r), lib, 1.0 - 0.1 * r, {0.5}, {0.5}), std::nullopt);
  const auto refine = render_refine_prompt(cfg, st);
  CHECK(refine.find("{recent_rounds}") == std::string::npos);
  CHECK(refine.find("{best_round_details}") == std::string::npos);
  CHECK(refine.find("Round 1 |") == std::string::npos);  // only the last three rounds
  CHECK(refine.find("Round 2 |") != std::string::npos);
  CHECK(refine.find("Round 4 |") != std::string::npos);
}

TEST_CASE("llm: minimal reply parses to one term per stream") {
  ProposerConfig cfg;
  cfg.kind = ProposerKind::Llm;
  ScriptedTransport t;
  t.replies = {kMinimal};
  auto p = propose(cfg, SearchState{}, 1, &t);
  CHECK(p.source == "llm");
  CHECK(p.library.message_terms.size() == 1);
  CHECK(p.library.update_terms.size() == 1);
  REQUIRE(t.seen.size() == 1);
  REQUIRE(t.seen[0].messages.size() == 2);
  CHECK(t.seen[0].messages[0].role == "system");
  CHECK(t.seen[0].messages[0].content == resources::system_prompt());
  CHECK(t.seen[0].messages[1].content == render_init_prompt(cfg, 1));
  CHECK(p.exchanges.size() == 1);
}

TEST_CASE("llm: schema errors are fed back, then the heuristic takes over") {
  ProposerConfig cfg;
  cfg.kind = ProposerKind::Llm;
  cfg.llm.retries = 2;
  SUBCASE("repaired on the second attempt") {
    ScriptedTransport t;
    t.replies = {R"({"message_terms": []})", kMinimal};
    auto p = propose(cfg, SearchState{}, 1, &t);
    CHECK(p.source == "llm");
    REQUIRE(t.seen.size() == 2);
    CHECK(t.seen[1].messages[1].content.find("rejected") != std::string::npos);
    CHECK(p.exchanges.size() == 2);
  }
  SUBCASE("never repaired") {
    ScriptedTransport t;
    t.replies = {"nope", "nope", "nope"};
    auto p = propose(cfg, SearchState{}, 1, &t);
    CHECK(p.source == "llm-fallback");
    CHECK(p.library == seed_library(1));
    CHECK(p.exchanges.size() == 3);
  }
  SUBCASE("no fallback") {
    cfg.llm.fallback = false;
    ScriptedTransport t;
    t.replies = {"nope", "nope", "nope"};
    CHECK_THROWS_AS(propose(cfg, SearchState{}, 1, &t), Error);
  }
}

TEST_CASE("llm: unreachable endpoint") {
  ProposerConfig cfg;
  cfg.kind = ProposerKind::Llm;
  ScriptedTransport t;
  t.offline = true;
  CHECK(propose(cfg, SearchState{}, 1, &t).source == "llm-fallback");
  CHECK(propose(cfg, SearchState{}, 1, nullptr).source == "llm-fallback");
  cfg.llm.fallback = false;
  try {
    propose(cfg, SearchState{}, 1, &t);
    FAIL("expected an exception");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ProposerUnavailable);
  }
}

TEST_CASE("proposer config validation") {
  ProposerConfig cfg;
  CHECK_NOTHROW(validate_proposer(cfg));
  cfg.heuristic.prune_threshold = 0.0;
  CHECK_THROWS_AS(validate_proposer(cfg), Error);
  cfg = {};
  cfg.kind = ProposerKind::Llm;
  CHECK_THROWS_AS(validate_proposer(cfg), Error);  // no endpoint
  cfg.llm.endpoint = "http://localhost:1/v1/chat/completions";
  CHECK_NOTHROW(validate_proposer(cfg));
  CHECK(parse_proposer_kind("llm") == ProposerKind::Llm);
  CHECK_THROWS_AS(parse_proposer_kind("mcts"), Error);
}

TEST_CASE("transcripts round-trip and replay strictly") {
  ChatRequest req{"m", 0.7, {{"system", "s"}, {"user", "line1\nline2 \"quoted\""}}};
  std::vector<Exchange> ex{{req, kMinimal}, {req, "second"}};
  const auto text = transcript_json(ex);
  CHECK(parse_transcript(text) == ex);
  CHECK(transcript_json(parse_transcript(text)) == text);
  CHECK_THROWS_AS(parse_transcript("{}"), Error);
  CHECK_THROWS_AS(parse_transcript("[{\"request\": 1}]"), Error);

  ReplayTransport replay(ex);
  CHECK(replay.send(req) == kMinimal);
  ChatRequest other = req;
  other.temperature = 0.1;
  CHECK_THROWS_AS(replay.send(other), Error);
  CHECK(replay.remaining() == 1);
  CHECK(replay.send(req) == "second");
  CHECK_THROWS_AS(replay.send(req), Error);
}

TEST_CASE("http transport against a local server") {
  httplib::Server server;
  std::atomic<int> calls{0};
  std::string auth, body;
  server.Post("/v1/chat/completions", [&](const httplib::Request& rq, httplib::Response& rs) {
    if (calls++ == 0) {
      rs.status = 503;
      return;
    }
    auth = rq.get_header_value("Authorization");
    body = rq.body;
    nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", kMinimal}}}}}}};
    rs.set_content(reply.dump(), "application/json");
  });
  server.Post("/broken", [](const httplib::Request&, httplib::Response& rs) { rs.set_content("{}", "application/json"); });
  server.Post("/denied", [](const httplib::Request&, httplib::Response& rs) { rs.status = 401; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  const std::string base = "http://127.0.0.1:" + std::to_string(port);
  HttpChatTransport http({base + "/v1/chat/completions", "secret", 5.0, 2});
  ChatRequest req{"some-model", 0.7, {{"system", "s"}, {"user", "u"}}};
  CHECK(http.send(req) == kMinimal);
  CHECK(calls == 2);
  CHECK(auth == "Bearer secret");
  const auto j = nlohmann::json::parse(body);
  CHECK(j["model"] == "some-model");
  CHECK(j["messages"].size() == 2);

  HttpChatTransport broken({base + "/broken", "", 5.0, 0});
  CHECK_THROWS_AS(broken.send(req), Error);
  HttpChatTransport denied({base + "/denied", "", 5.0, 3});
  CHECK_THROWS_AS(denied.send(req), Error);

  // the full proposer path over HTTP
  ProposerConfig cfg;
  cfg.kind = ProposerKind::Llm;
  calls = 1;
  auto p = propose(cfg, SearchState{}, 1, &http);
  CHECK(p.source == "llm");
  CHECK(p.library.message_terms[0].name == "diff");

  server.stop();
  th.join();
  CHECK_THROWS_AS(HttpChatTransport({"", "", 1.0, 0}), Error);
}
