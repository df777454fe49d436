#include "cosine/cli.hpp"

#include "cosine/error.hpp"
#include "cosine/evolve.hpp"
#include "cosine/numeric.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <ostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

namespace cosine {

namespace fs = std::filesystem;

TrajectoryDataset obtain_dataset(const RunConfig& cfg) {
  if (!cfg.dataset.path.empty()) return load_dataset(cfg.dataset.path);
  const Graph g = generate_graph(cfg.dataset.graph);
  return simulate(cfg.dataset.system, g, cfg.seed, &cfg.dataset.graph);
}

namespace {

BasisLibrary library_from_file(const std::string& path, std::size_t channels, std::size_t max_terms) {
  return parse_library_json(read_text_file(path), channels, max_terms);
}

// Primitives for the dataset's system, from a file or the built-in table.
std::optional<Primitives> primitives_for(const RunConfig& cfg, const std::string& system) {
  const auto table = cfg.eval.primitives.empty() ? builtin_primitives()
                                                 : parse_primitives(read_text_file(cfg.eval.primitives));
  const auto it = table.find(system);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

std::string dataset_summary(const TrajectoryDataset& ds) {
  std::string s = "system=" + ds.system + " nodes=" + std::to_string(ds.nodes) + " channels=" +
                  std::to_string(ds.channels) + " trajectories=" + std::to_string(ds.trajectories) +
                  " frames=" + std::to_string(ds.steps);
  if (ds.adjacency) {
    std::size_t edges = 0;
    for (auto v : *ds.adjacency) edges += v;
    s += " directed_edges=" + std::to_string(edges);
  } else {
    s += " (no ground-truth graph)";
  }
  return s;
}

void write_eval_files(const Evaluation& ev, const std::vector<std::uint8_t>* truth, std::size_t nodes,
                      const fs::path& dir) {
  write_text_file(dir / "edges.csv", edges_csv(ev.scores, truth, nodes));
  if (ev.auc) write_text_file(dir / "auc.txt", format_double(*ev.auc) + "\n");
  write_text_file(dir / "terms.csv", terms_csv(ev.terms));
}

// Options that most verbs share; each is applied only when given.
struct Common {
  std::string config, out, data;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double sigma = 0.0;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* epochs_opt = nullptr;
  CLI::Option* sigma_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* data_opt = nullptr;

  void add(CLI::App* app, bool training) {
    app->add_option("--config", config, "run configuration JSON")->check(CLI::ExistingFile);
    seed_opt = app->add_option("--seed", seed, "global seed (graph, simulation and training)");
    out_opt = app->add_option("--out", out, "output directory");
    if (training) {
      data_opt = app->add_option("--data", data, "dataset directory or trajectory CSV; otherwise simulated");
      epochs_opt = app->add_option("--epochs", epochs, "inner training epochs");
      sigma_opt = app->add_option("--sigma", sigma, "likelihood scale; 0 picks it from the data");
    }
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? parse_run_config("{}") : load_run_config(config);
    if (seed_opt->count()) apply_seed(cfg, seed);
    if (out_opt->count()) cfg.output = out;
    if (data_opt && data_opt->count()) cfg.dataset.path = data;
    if (epochs_opt && epochs_opt->count()) cfg.train.epochs = epochs;
    if (sigma_opt && sigma_opt->count()) cfg.train.sigma = sigma;
    return cfg;
  }
};

void save_config(const RunConfig& cfg) { write_text_file(fs::path(cfg.output) / "config.json", run_config_json(cfg)); }

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  validate_spec(cfg.dataset.system);
  const Graph g = generate_graph(cfg.dataset.graph);
  const auto isolated = g.isolated_nodes();
  const auto ds = simulate(cfg.dataset.system, g, cfg.seed, &cfg.dataset.graph);
  save_dataset(ds, cfg.output);
  out << dataset_summary(ds) << "\n";
  if (!isolated.empty()) out << "note: " << isolated.size() << " isolated node(s) in the generated graph\n";
  out << "wrote " << cfg.output << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  check_inputs(cfg);
  const auto data = obtain_dataset(cfg);
  out << dataset_summary(data) << "\n";
  const auto lib = cfg.library.empty() ? seed_library(data.channels)
                                       : library_from_file(cfg.library, data.channels, cfg.evolve.proposer.max_terms);
  const auto res = train_inner(data, lib, cfg.train);
  const fs::path dir = cfg.output;
  const auto req = primitives_for(cfg, data.system);
  const std::vector<std::uint8_t>* truth = data.adjacency ? &*data.adjacency : nullptr;
  const auto ev = evaluate_state(res.state, cfg.train.tau, truth, req ? &*req : nullptr, cfg.eval.k, 0);
  write_text_file(dir / "checkpoint.json", checkpoint_json(res.state, cfg.train, &res.metrics));
  write_text_file(dir / "loss_curve.csv", loss_curve_csv(res.metrics.curve));
  write_eval_files(ev, truth, data.nodes, dir);
  save_config(cfg);
  out << "best_epoch=" << res.metrics.best_epoch << " val_nll=" << format_double(res.metrics.val_nll)
      << " sigma=" << format_double(res.metrics.sigma);
  if (ev.auc) out << " auc=" << format_double(*ev.auc);
  out << "\nwrote " << dir.string() << "\n";
  return 0;
}

std::unique_ptr<ChatTransport> make_transport(const ProposerConfig& p, const std::string& replay) {
  if (p.kind != ProposerKind::Llm) return nullptr;
  if (!replay.empty()) return replay_from_directory(replay);
  std::string token;
  if (!p.llm.token_env.empty()) {
    const char* v = std::getenv(p.llm.token_env.c_str());
    if (!v || !*v)
      throw Error(ErrorCode::ConfigError, "the llm proposer needs an API token in $" + p.llm.token_env +
                                              " (set evolve.llm.token_env to \"\" for servers without auth)");
    token = v;
  }
  return std::make_unique<HttpChatTransport>(HttpSettings{p.llm.endpoint, token, p.llm.timeout_s, 2});
}

int cmd_evolve(RunConfig cfg, const std::string& replay, std::ostream& out) {
  check_inputs(cfg);
  if (!replay.empty() && cfg.evolve.proposer.llm.endpoint.empty()) cfg.evolve.proposer.llm.endpoint = "replay:" + replay;
  validate_proposer(cfg.evolve.proposer);
  auto transport = make_transport(cfg.evolve.proposer, replay);
  const auto data = obtain_dataset(cfg);
  out << dataset_summary(data) << "\n";

  OuterConfig outer;
  outer.rounds = cfg.evolve.rounds;
  outer.patience = cfg.evolve.patience;
  if (!cfg.evolve.initial_library.empty())
    outer.initial = library_from_file(cfg.evolve.initial_library, data.channels, cfg.evolve.proposer.max_terms);

  const auto rep = run_outer(data, cfg.train, cfg.evolve.proposer, outer, transport.get(),
                             [&](const RoundRecord& r, const std::vector<std::string>& notes) {
                               out << "round " << r.round << " [" << r.source << "] ";
                               if (r.failed)
                                 out << "failed: " << r.failure;
                               else
                                 out << "val_nll=" << format_double(r.val_nll);
                               out << (r.accepted ? " accepted" : " rejected") << "\n";
                               for (const auto& n : notes) out << "  " << n << "\n";
                             });
  const auto req = primitives_for(cfg, data.system);
  write_report(rep, data, req ? &*req : nullptr, cfg.eval.k, cfg.output);
  save_config(cfg);
  out << "stopped: " << rep.stop_reason << "\nbest round " << rep.best().round
      << " val_nll=" << format_double(rep.best().val_nll);
  if (fs::exists(fs::path(cfg.output) / "auc.txt")) out << " auc=" << read_text_file(fs::path(cfg.output) / "auc.txt");
  else out << "\n";
  out << "wrote " << cfg.output << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, system, metric = "all";
  std::size_t k = 0;
  CLI::Option* k_opt = nullptr;
};

int cmd_eval(RunConfig cfg, const EvalArgs& a, std::ostream& out) {
  check_inputs(cfg);
  fs::path ckpt = a.checkpoint;
  std::size_t round = 0;
  if (fs::is_directory(ckpt)) {
    const auto report = ckpt / "report.json";
    if (fs::exists(report)) round = nlohmann::json::parse(read_text_file(report)).at("best_round").get<std::size_t>();
    ckpt /= "checkpoint.json";
  }
  TrainConfig tcfg;
  const auto state = load_checkpoint(read_text_file(ckpt), &tcfg);
  if (cfg.dataset.path.empty()) throw Error(ErrorCode::ConfigError, "eval needs --data");
  const auto data = load_dataset(cfg.dataset.path);
  if (data.nodes != state.nodes() || data.channels != state.channels())
    throw Error(ErrorCode::ShapeMismatch, "checkpoint and dataset disagree on nodes or channels");
  if (a.k_opt->count()) cfg.eval.k = a.k;
  if (cfg.eval.k == 0) throw Error(ErrorCode::ConfigError, "k must be >= 1");

  const bool want_auc = a.metric != "terms";
  const bool want_terms = a.metric != "auc";
  const std::vector<std::uint8_t>* truth = nullptr;
  if (want_auc) {
    if (data.adjacency) truth = &*data.adjacency;
    else if (a.metric == "auc") throw Error(ErrorCode::MissingGroundTruth, "dataset has no ground-truth graph");
    else out << "notice: dataset has no ground-truth graph; AUC skipped, term metrics only\n";
  }
  const std::string system = a.system.empty() ? data.system : a.system;
  const auto req = want_terms ? primitives_for(cfg, system) : std::nullopt;
  if (want_terms && !req) out << "notice: no reference primitives for system '" << system << "'\n";
  const auto ev = evaluate_state(state, tcfg.tau, truth, req ? &*req : nullptr, cfg.eval.k, round);

  const fs::path dir = cfg.output;
  write_eval_files(ev, truth, data.nodes, dir);
  nlohmann::ordered_json m;
  m["system"] = system;
  m["k"] = cfg.eval.k;
  if (ev.auc) m["auc"] = *ev.auc;
  if (ev.term_accuracy) m["term_accuracy"] = {{"message", ev.term_accuracy->message}, {"update", ev.term_accuracy->update}};
  write_text_file(dir / "metrics.json", m.dump(2) + "\n");
  if (ev.auc) out << "auc=" << format_double(*ev.auc) << "\n";
  if (ev.term_accuracy)
    out << "term_accuracy(k=" << cfg.eval.k << ") message=" << format_double(ev.term_accuracy->message)
        << " update=" << format_double(ev.term_accuracy->update) << "\n";
  out << "wrote " << dir.string() << "\n";
  return 0;
}

std::string volume_of(const SystemSpec& s) { return std::to_string(s.trajectories) + "x" + std::to_string(s.steps); }

SweepRow run_one(const RunConfig& base, const SweepSpec& spec, const std::string& system, const std::string& graph,
                 std::uint64_t seed) {
  SweepRow row;
  row.system = system;
  row.graph = graph;
  row.seed = seed;
  row.nodes = base.dataset.graph.nodes;
  try {
    RunConfig cfg = base;
    cfg.dataset.path.clear();
    cfg.dataset.system.kind = parse_system_kind(system);
    apply_default_volume(cfg.dataset.system);
    if (spec.trajectories) cfg.dataset.system.trajectories = spec.trajectories;
    if (spec.steps) cfg.dataset.system.steps = spec.steps;
    cfg.dataset.graph.family = parse_graph_family(graph);
    apply_seed(cfg, seed);
    row.volume = volume_of(cfg.dataset.system);
    const auto data = obtain_dataset(cfg);
    const auto lib = cfg.library.empty() ? seed_library(data.channels)
                                         : library_from_file(cfg.library, data.channels, cfg.evolve.proposer.max_terms);
    const ModelState* state = nullptr;
    std::optional<TrainResult> single;
    std::optional<FinalReport> rep;
    if (spec.evolve) {
      OuterConfig outer;
      outer.rounds = cfg.evolve.rounds;
      outer.patience = cfg.evolve.patience;
      outer.initial = lib;
      ProposerConfig p = cfg.evolve.proposer;
      p.kind = ProposerKind::Heuristic;
      rep = run_outer(data, cfg.train, p, outer);
      state = &rep->best_result().state;
      row.val_nll = rep->best().val_nll;
    } else {
      single = train_inner(data, lib, cfg.train);
      state = &single->state;
      row.val_nll = single->metrics.val_nll;
    }
    row.auc = auc(edge_scores(state->logits, cfg.train.tau), *data.adjacency, data.nodes);
    row.ok = true;
  } catch (const std::exception& e) {
    row.error = e.what();
  }
  return row;
}

}  // namespace

std::vector<SweepRow> run_sweep(const RunConfig& base, const SweepSpec& spec) {
  struct Cell {
    std::string system, graph;
    std::uint64_t seed;
  };
  std::vector<Cell> grid;
  for (const auto& s : spec.systems) {
    parse_system_kind(s);
    for (const auto& g : spec.graphs) {
      parse_graph_family(g);
      for (auto seed : spec.seeds) grid.push_back({s, g, seed});
    }
  }
  std::vector<SweepRow> rows(grid.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++)
      rows[i] = run_one(base, spec, grid[i].system, grid[i].graph, grid[i].seed);
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(spec.jobs, grid.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return rows;
}

std::string sweep_runs_csv(const std::vector<SweepRow>& rows) {
  std::string out = "system,graph,nodes,volume,seed,auc,val_nll,status\n";
  for (const auto& r : rows) {
    out += r.system + "," + r.graph + "," + std::to_string(r.nodes) + "," + r.volume + "," + std::to_string(r.seed) + ",";
    out += r.ok ? format_double(r.auc) + "," + format_double(r.val_nll) + ",ok\n" : ",," + csv_field(r.error) + "\n";
  }
  return out;
}

std::string sweep_summary_csv(const std::vector<SweepRow>& rows) {
  std::string out = "system,graph,nodes,volume,runs,failed,auc_mean,auc_std\n";
  std::vector<std::string> order;
  std::map<std::string, std::vector<const SweepRow*>> groups;
  for (const auto& r : rows) {
    const std::string key = r.system + "," + r.graph + "," + std::to_string(r.nodes) + "," + r.volume;
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  for (const auto& key : order) {
    std::vector<double> a;
    std::size_t failed = 0;
    for (const auto* r : groups[key]) {
      if (r->ok) a.push_back(r->auc);
      else ++failed;
    }
    out += key + "," + std::to_string(a.size()) + "," + std::to_string(failed) + ",";
    if (a.empty()) {
      out += ",\n";
      continue;
    }
    double mean = 0.0;
    for (double v : a) mean += v;
    mean /= static_cast<double>(a.size());
    double var = 0.0;
    for (double v : a) var += (v - mean) * (v - mean);
    const double sd = a.size() > 1 ? std::sqrt(var / static_cast<double>(a.size() - 1)) : 0.0;
    out += format_double(mean) + "," + format_double(sd) + "\n";
  }
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Relational inference with evolving symbolic basis libraries", "cosine"};
  app.require_subcommand(1);

  Common gen_c, train_c, evolve_c, eval_c, sweep_c;

  auto* gen = app.add_subcommand("gen-data", "simulate a benchmark system on a generated graph and save the dataset");
  gen_c.add(gen, false);
  std::string g_system, g_graph;
  std::size_t g_nodes = 0, g_traj = 0, g_steps = 0;
  double g_p = 0.0;
  auto* g_system_opt = gen->add_option("--system", g_system, "mm, diff, spring, kuramoto, fj or cmn");
  auto* g_graph_opt = gen->add_option("--graph", g_graph, "er, ba or ws");
  auto* g_nodes_opt = gen->add_option("--nodes", g_nodes, "number of nodes");
  auto* g_p_opt = gen->add_option("--p", g_p, "edge probability for er graphs");
  auto* g_traj_opt = gen->add_option("--trajectories", g_traj, "trajectories (B)");
  auto* g_steps_opt = gen->add_option("--steps", g_steps, "frames per trajectory (T)");

  auto* train = app.add_subcommand("train", "fit one fixed library and score the recovered graph");
  train_c.add(train, true);
  std::string t_library;
  train->add_option("--library", t_library, "library JSON (default: seed library)")->check(CLI::ExistingFile);

  auto* evolve = app.add_subcommand("evolve", "run the library search outer loop");
  evolve_c.add(evolve, true);
  std::string e_proposer, e_endpoint, e_model, e_replay, e_initial;
  std::size_t e_rounds = 0, e_patience = 0;
  auto* e_proposer_opt = evolve->add_option("--proposer", e_proposer, "heuristic or llm");
  auto* e_endpoint_opt = evolve->add_option("--endpoint", e_endpoint, "chat-completions URL for the llm proposer");
  auto* e_model_opt = evolve->add_option("--model", e_model, "model name sent to the endpoint");
  evolve->add_option("--replay", e_replay, "replay recorded transcripts from this directory instead of calling out")
      ->check(CLI::ExistingDirectory);
  auto* e_initial_opt =
      evolve->add_option("--initial-library", e_initial, "library JSON for round 0")->check(CLI::ExistingFile);
  auto* e_rounds_opt = evolve->add_option("--rounds", e_rounds, "maximum rounds (R)");
  auto* e_patience_opt = evolve->add_option("--patience", e_patience, "stop after this many rejections in a row");

  auto* eval = app.add_subcommand("eval", "score a checkpoint against a dataset");
  eval_c.add(eval, false);
  EvalArgs ea;
  std::string ev_data, ev_primitives;
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint JSON or a run directory")->required();
  eval->add_option("--data", ev_data, "dataset directory or trajectory CSV")->required();
  ea.k_opt = eval->add_option("--k", ea.k, "top-K terms for term accuracy");
  eval->add_option("--primitives", ev_primitives, "reference primitives JSON")->check(CLI::ExistingFile);
  eval->add_option("--system", ea.system, "primitives entry to use (default: the dataset's system)");
  eval->add_option("--metric", ea.metric, "auc, terms or all")->check(CLI::IsMember({"auc", "terms", "all"}));

  auto* sweep = app.add_subcommand("sweep", "train over a grid of systems, graphs and seeds");
  sweep_c.add(sweep, true);
  SweepSpec ss;
  ss.systems = {"diff"};
  ss.graphs = {"er"};
  ss.seeds = {1, 2, 3, 4, 5};
  std::size_t s_nodes = 0;
  sweep->add_option("--systems", ss.systems, "systems to run")->delimiter(',');
  sweep->add_option("--graphs", ss.graphs, "graph families")->delimiter(',');
  sweep->add_option("--seeds", ss.seeds, "seeds")->delimiter(',');
  auto* s_nodes_opt = sweep->add_option("--nodes", s_nodes, "number of nodes");
  sweep->add_option("--trajectories", ss.trajectories, "trajectories (default: per-system volume)");
  sweep->add_option("--steps", ss.steps, "frames per trajectory (default: per-system volume)");
  sweep->add_flag("--evolve", ss.evolve, "run the heuristic outer loop instead of a single training run");
  sweep->add_option("--jobs", ss.jobs, "parallel runs")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      RunConfig cfg = gen_c.resolve();
      auto& sys = cfg.dataset.system;
      if (g_system_opt->count()) {
        sys.kind = parse_system_kind(g_system);
        apply_default_volume(sys);
      }
      if (g_graph_opt->count()) cfg.dataset.graph.family = parse_graph_family(g_graph);
      if (g_nodes_opt->count()) cfg.dataset.graph.nodes = g_nodes;
      if (g_p_opt->count()) cfg.dataset.graph.p = g_p;
      if (g_traj_opt->count()) sys.trajectories = g_traj;
      if (g_steps_opt->count()) sys.steps = g_steps;
      return cmd_gen_data(cfg, out);
    }
    if (train->parsed()) {
      RunConfig cfg = train_c.resolve();
      if (!t_library.empty()) cfg.library = t_library;
      return cmd_train(cfg, out);
    }
    if (evolve->parsed()) {
      RunConfig cfg = evolve_c.resolve();
      auto& p = cfg.evolve.proposer;
      if (e_proposer_opt->count()) p.kind = parse_proposer_kind(e_proposer);
      if (e_endpoint_opt->count()) p.llm.endpoint = e_endpoint;
      if (e_model_opt->count()) p.llm.model = e_model;
      if (e_initial_opt->count()) cfg.evolve.initial_library = e_initial;
      if (e_rounds_opt->count()) cfg.evolve.rounds = e_rounds;
      if (e_patience_opt->count()) cfg.evolve.patience = e_patience;
      return cmd_evolve(cfg, e_replay, out);
    }
    if (eval->parsed()) {
      RunConfig cfg = eval_c.resolve();
      cfg.dataset.path = ev_data;
      if (!ev_primitives.empty()) cfg.eval.primitives = ev_primitives;
      return cmd_eval(cfg, ea, out);
    }
    if (sweep->parsed()) {
      RunConfig cfg = sweep_c.resolve();
      if (s_nodes_opt->count()) cfg.dataset.graph.nodes = s_nodes;
      check_inputs(cfg);
      const auto rows = run_sweep(cfg, ss);
      const fs::path dir = cfg.output;
      write_text_file(dir / "runs.csv", sweep_runs_csv(rows));
      const auto summary = sweep_summary_csv(rows);
      write_text_file(dir / "sweep.csv", summary);
      save_config(cfg);
      out << summary << "wrote " << dir.string() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace cosine
