#include "cosine/config.hpp"

#include "cosine/error.hpp"

#include <filesystem>
#include <set>
#include <type_traits>

#include "json.hpp"

namespace cosine {

using nlohmann::json;
using nlohmann::ordered_json;

void apply_default_volume(SystemSpec& s) {
  switch (s.kind) {
    case SystemKind::MM:
    case SystemKind::Diff: s.trajectories = 50, s.steps = 10; break;
    case SystemKind::Spring: s.trajectories = 15, s.steps = 10; break;
    case SystemKind::Kuramoto: s.trajectories = 30, s.steps = 30; break;
    case SystemKind::FJ:
    case SystemKind::CMN: s.trajectories = 20, s.steps = 10; break;
  }
}

namespace {

[[noreturn]] void bad(const std::string& m) { throw Error(ErrorCode::ConfigError, m); }

// Field lists shared by the reader and the writer.
template <class F>
void graph_fields(GraphSpec& g, F&& f) {
  f("nodes", g.nodes);
  f("p", g.p);
  f("m", g.m);
  f("k", g.k);
  f("p_rewire", g.p_rewire);
}

template <class F>
void system_fields(SystemSpec& s, F&& f) {
  f("beta", s.beta);
  f("k_spring", s.k_spring);
  f("gamma", s.gamma);
  f("spring_v0_std", s.spring_v0_std);
  f("kappa", s.kappa);
  f("omega_lo", s.omega_lo);
  f("omega_hi", s.omega_hi);
  f("kuramoto_augmented", s.kuramoto_augmented);
  f("shared_statics", s.shared_statics);
  f("cmn_lambda", s.cmn_lambda);
  f("cmn_s", s.cmn_s);
  f("dt", s.dt);
  f("sample_every", s.sample_every);
  f("steps", s.steps);
  f("trajectories", s.trajectories);
}

template <class F>
void train_fields(TrainConfig& t, F&& f) {
  f("tau", t.tau);
  f("beta_kl", t.beta_kl);
  f("lambda_w", t.lambda_w);
  f("sigma", t.sigma);
  f("lr", t.lr);
  f("lr_a", t.lr_a);
  f("epochs", t.epochs);
  f("batch_size", t.batch_size);
  f("val_fraction", t.val_fraction);
  f("prior_r", t.prior_r);
  f("warm_start", t.warm_start);
  f("init_psi_std", t.init_psi_std);
  f("init_w_std", t.init_w_std);
  f("cache_limit_mb", t.cache_limit_mb);
}

template <class F>
void heuristic_fields(HeuristicConfig& h, F&& f) {
  f("prune_threshold", h.prune_threshold);
  f("stall_tolerance", h.stall_tolerance);
  f("stall_window", h.stall_window);
}

template <class F>
void llm_fields(LlmConfig& l, F&& f) {
  f("endpoint", l.endpoint);
  f("model", l.model);
  f("token_env", l.token_env);
  f("timeout_s", l.timeout_s);
  f("retries", l.retries);
  f("temperature", l.temperature);
  f("fallback", l.fallback);
}

class Reader {
public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) bad(label() + " must be a JSON object");
  }

  template <class T>
  void operator()(const char* key, T& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    const json& v = *it;
    const std::string name = label(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) bad(name + " must be true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) bad(name + " must be a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) bad(name + " must be a non-negative integer");
      out = v.get<T>();
    } else {
      if (!v.is_number()) bad(name + " must be a number");
      out = v.get<double>();
    }
  }

  const json* child(const char* key) {
    const auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  std::string label(const std::string& key = {}) const {
    if (key.empty()) return where_.empty() ? "config" : where_;
    return where_.empty() ? key : where_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!used_.count(key)) bad("unknown key '" + label(key) + "'");
  }

private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

struct Writer {
  ordered_json& j;
  template <class T>
  void operator()(const char* key, T& v) {
    j[key] = v;
  }
};

template <class Fields>
void read_section(const json* j, const std::string& where, Fields&& fields) {
  if (!j) return;
  Reader r(*j, where);
  fields(r);
  r.finish();
}

template <class E, class Parse>
E parse_enum(const std::string& text, Parse parse, const std::string& where) {
  try {
    return parse(text);
  } catch (const Error& e) {
    bad(where + ": " + e.detail());
  }
}

}  // namespace

RunConfig parse_run_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    bad(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  apply_default_volume(cfg.dataset.system);
  Reader top(j, "");
  top("library", cfg.library);
  top("output", cfg.output);
  top("seed", cfg.seed);

  if (const json* ds = top.child("dataset")) {
    Reader r(*ds, "dataset");
    r("path", cfg.dataset.path);
    read_section(r.child("graph"), "dataset.graph", [&](Reader& g) {
      std::string family = to_string(cfg.dataset.graph.family);
      g("family", family);
      cfg.dataset.graph.family = parse_enum<GraphFamily>(family, parse_graph_family, "dataset.graph.family");
      graph_fields(cfg.dataset.graph, g);
    });
    read_section(r.child("system"), "dataset.system", [&](Reader& s) {
      std::string kind = to_string(cfg.dataset.system.kind);
      s("kind", kind);
      cfg.dataset.system.kind = parse_enum<SystemKind>(kind, parse_system_kind, "dataset.system.kind");
      apply_default_volume(cfg.dataset.system);
      system_fields(cfg.dataset.system, s);
    });
    r.finish();
  }
  read_section(top.child("train"), "train", [&](Reader& r) { train_fields(cfg.train, r); });
  if (const json* ev = top.child("evolve")) {
    Reader r(*ev, "evolve");
    auto& p = cfg.evolve.proposer;
    std::string kind(to_string(p.kind));
    r("proposer", kind);
    p.kind = parse_enum<ProposerKind>(kind, parse_proposer_kind, "evolve.proposer");
    r("max_terms", p.max_terms);
    r("description", p.description);
    r("rounds", cfg.evolve.rounds);
    r("patience", cfg.evolve.patience);
    r("initial_library", cfg.evolve.initial_library);
    read_section(r.child("heuristic"), "evolve.heuristic", [&](Reader& h) { heuristic_fields(p.heuristic, h); });
    read_section(r.child("llm"), "evolve.llm", [&](Reader& l) { llm_fields(p.llm, l); });
    r.finish();
  }
  read_section(top.child("eval"), "eval", [&](Reader& r) {
    r("k", cfg.eval.k);
    r("primitives", cfg.eval.primitives);
  });
  top.finish();

  apply_seed(cfg, cfg.seed);
  validate_spec(cfg.dataset.system);
  validate_config(cfg.train);
  if (cfg.eval.k == 0) bad("eval.k must be >= 1");
  if (cfg.evolve.rounds == 0) bad("evolve.rounds must be >= 1");
  if (cfg.evolve.patience == 0) bad("evolve.patience must be >= 1");
  if (cfg.evolve.proposer.max_terms == 0) bad("evolve.max_terms must be >= 1");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::IoError, "config file not found: " + path);
  return parse_run_config(read_text_file(path));
}

std::string run_config_json(const RunConfig& in) {
  RunConfig c = in;
  ordered_json j;
  ordered_json graph, system, train, evolve, heuristic, llm;
  graph["family"] = to_string(c.dataset.graph.family);
  graph_fields(c.dataset.graph, Writer{graph});
  system["kind"] = to_string(c.dataset.system.kind);
  system_fields(c.dataset.system, Writer{system});
  train_fields(c.train, Writer{train});
  heuristic_fields(c.evolve.proposer.heuristic, Writer{heuristic});
  llm_fields(c.evolve.proposer.llm, Writer{llm});
  j["dataset"] = {{"path", c.dataset.path}, {"graph", graph}, {"system", system}};
  j["train"] = train;
  evolve["proposer"] = std::string(to_string(c.evolve.proposer.kind));
  evolve["max_terms"] = c.evolve.proposer.max_terms;
  evolve["description"] = c.evolve.proposer.description;
  evolve["rounds"] = c.evolve.rounds;
  evolve["patience"] = c.evolve.patience;
  evolve["initial_library"] = c.evolve.initial_library;
  evolve["heuristic"] = heuristic;
  evolve["llm"] = llm;
  j["evolve"] = evolve;
  j["eval"] = {{"k", c.eval.k}, {"primitives", c.eval.primitives}};
  j["library"] = c.library;
  j["output"] = c.output;
  j["seed"] = c.seed;
  return j.dump(2) + "\n";
}

void apply_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.dataset.graph.seed = seed;
  cfg.train.seed = seed;
}

void check_inputs(const RunConfig& cfg, bool needs_dataset_path) {
  auto need = [](const std::string& path, const char* what) {
    if (!path.empty() && !std::filesystem::exists(path))
      throw Error(ErrorCode::IoError, std::string(what) + " not found: " + path);
  };
  if (needs_dataset_path && cfg.dataset.path.empty()) throw Error(ErrorCode::ConfigError, "no dataset path given");
  need(cfg.dataset.path, "dataset");
  need(cfg.library, "library file");
  need(cfg.evolve.initial_library, "initial library file");
  need(cfg.eval.primitives, "primitives file");
}

}  // namespace cosine
