#include "cosine/evolve.hpp"

#include "cosine/error.hpp"
#include "cosine/graphgen.hpp"
#include "cosine/numeric.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace cosine {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void validate_outer(const OuterConfig& cfg) {
  if (cfg.rounds == 0) throw Error(ErrorCode::ConfigError, "rounds must be >= 1");
  if (cfg.patience == 0) throw Error(ErrorCode::ConfigError, "patience must be >= 1");
}

namespace {

RoundRecord trained_record(std::size_t round, const BasisLibrary& lib, const TrainResult& res) {
  RoundRecord r;
  r.round = round;
  r.library = lib;
  r.val_nll = res.metrics.val_nll;
  r.val_total = res.metrics.val_total;
  const auto& c = res.state.coeffs;
  r.digest = make_digest(round, r.val_nll, lib, c.w_msg, c.w_upd, c.D, res.metrics.residuals);
  return r;
}

}  // namespace

FinalReport run_outer(const TrajectoryDataset& data, const TrainConfig& train, const ProposerConfig& proposer,
                      const OuterConfig& outer, ChatTransport* transport, const RoundCallback& on_round) {
  validate_config(train);
  validate_proposer(proposer);
  validate_outer(outer);
  check_dataset(data);

  FinalReport rep;
  rep.train = train;
  rep.nodes = data.nodes;
  rep.channels = data.channels;
  std::size_t rejected_in_a_row = 0;

  for (std::size_t round = 0; round < outer.rounds; ++round) {
    Proposal p;
    if (round == 0 && outer.initial) {
      p.library = *outer.initial;
      p.source = "given";
      validate_library(p.library, data.channels, proposer.max_terms);
    } else {
      p = propose(proposer, rep.state, data.channels, transport);
      if (rep.state.best && p.library == rep.state.best_record()->library) {
        // nothing to train, but keep the conversation for replay
        rep.transcripts.push_back(std::move(p.exchanges));
        rep.notes.push_back(std::move(p.notes));
        rep.stop_reason = "proposer returned the incumbent library";
        break;
      }
    }
    if (round == 0 && p.source == "heuristic") p.source = "seed";

    const ModelState* warm = rep.state.best_result ? &rep.state.best_result->state : nullptr;
    std::optional<TrainResult> res;
    RoundRecord rec;
    try {
      res = train_inner(data, p.library, train, warm);
      rec = trained_record(round, p.library, *res);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DivergedLoss) throw;
      rec.round = round;
      rec.library = p.library;
      rec.failed = true;
      rec.failure = e.what();
      rec.digest.round = round;
    }
    rec.source = p.source;
    const bool accepted = accept_if_better(rep.state, std::move(rec), std::move(res));
    rep.transcripts.push_back(std::move(p.exchanges));
    rep.notes.push_back(std::move(p.notes));
    if (on_round) on_round(rep.state.history.back(), rep.notes.back());

    rejected_in_a_row = accepted ? 0 : rejected_in_a_row + 1;
    if (rejected_in_a_row >= outer.patience) {
      rep.stop_reason = "no improvement in " + std::to_string(outer.patience) + " rounds";
      break;
    }
  }
  if (rep.stop_reason.empty()) rep.stop_reason = "round limit reached";
  if (!rep.state.best) throw Error(ErrorCode::DivergedLoss, "no round trained successfully");
  return rep;
}

Evaluation evaluate_state(const ModelState& state, double tau, const std::vector<std::uint8_t>* truth,
                          const Primitives* required, std::size_t k, std::size_t round) {
  Evaluation ev;
  ev.scores = edge_scores(state.logits, tau);
  if (truth) ev.auc = auc(ev.scores, *truth, state.nodes());
  const auto& c = state.coeffs;
  if (required) ev.term_accuracy = term_accuracy(state.library, c.w_msg, c.w_upd, *required, k, c.D);
  for (Stream s : {Stream::Message, Stream::Update}) {
    const auto& terms = state.library.stream(s);
    const auto& w = s == Stream::Message ? c.w_msg : c.w_upd;
    for (std::size_t t : rank_terms(terms, w, c.D))
      ev.terms.push_back({terms[t].name, terms[t].expr.to_string(),
                          mean_abs(std::span<const double>(w).subspan(t * c.D, c.D)), s == Stream::Message ? "message" : "update",
                          round});
  }
  return ev;
}

std::string rounds_csv(const std::vector<RoundRecord>& history) {
  std::string out = "round,val_nll,accepted\n";
  for (const auto& r : history)
    out += std::to_string(r.round) + "," + (r.failed ? std::string() : format_double(r.val_nll)) + "," +
           (r.accepted ? "1" : "0") + "\n";
  return out;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out.flush()) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_report(const FinalReport& report, const TrajectoryDataset& data, const Primitives* required, std::size_t k,
                  const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string());

  const auto& best = report.best();
  const auto& res = report.best_result();
  const std::vector<std::uint8_t>* truth = data.adjacency ? &*data.adjacency : nullptr;
  const auto ev = evaluate_state(res.state, report.train.tau, truth, required, k, best.round);

  write_text_file(dir / "edges.csv", edges_csv(ev.scores, truth, report.nodes));
  if (ev.auc) write_text_file(dir / "auc.txt", format_double(*ev.auc) + "\n");
  write_text_file(dir / "terms.csv", terms_csv(ev.terms));
  write_text_file(dir / "rounds.csv", rounds_csv(report.state.history));
  write_text_file(dir / "loss_curve.csv", loss_curve_csv(res.metrics.curve));
  write_text_file(dir / "library.json", library_to_json(best.library) + "\n");
  write_text_file(dir / "checkpoint.json", checkpoint_json(res.state, report.train, &res.metrics));

  ordered_json j;
  j["system"] = data.system;
  j["nodes"] = report.nodes;
  j["channels"] = report.channels;
  j["best_round"] = best.round;
  j["best_val_nll"] = best.val_nll;
  j["sigma"] = res.metrics.sigma;
  j["stop_reason"] = report.stop_reason;
  if (ev.auc) j["auc"] = *ev.auc;
  if (ev.term_accuracy) {
    j["term_accuracy"] = {{"k", k}, {"message", ev.term_accuracy->message}, {"update", ev.term_accuracy->update}};
  }
  j["library"] = ordered_json::parse(library_to_json(best.library));
  j["rounds"] = ordered_json::array();
  for (std::size_t r = 0; r < report.state.history.size(); ++r) {
    const auto& h = report.state.history[r];
    ordered_json item;
    item["round"] = h.round;
    item["source"] = h.source;
    item["accepted"] = h.accepted;
    if (h.failed) {
      item["failed"] = h.failure;
    } else {
      item["val_nll"] = h.val_nll;
      item["val_total"] = h.val_total;
    }
    item["library"] = ordered_json::parse(library_to_json(h.library));
    item["notes"] = r < report.notes.size() ? report.notes[r] : std::vector<std::string>{};
    j["rounds"].push_back(std::move(item));
  }
  write_text_file(dir / "report.json", j.dump(2) + "\n");

  for (std::size_t r = 0; r < report.transcripts.size(); ++r) {
    if (report.transcripts[r].empty()) continue;
    char name[32];
    std::snprintf(name, sizeof name, "round_%03zu.json", r);
    write_text_file(dir / "transcripts" / name, transcript_json(report.transcripts[r]));
  }
}

}  // namespace cosine
