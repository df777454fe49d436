#include "cosine/dataset.hpp"

#include "cosine/error.hpp"
#include "cosine/numeric.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace cosine {

namespace fs = std::filesystem;
using nlohmann::json;

void check_dataset(const TrajectoryDataset& ds) {
  const std::size_t want = ds.trajectories * ds.steps * ds.nodes * ds.channels;
  if (ds.data.size() != want) {
    throw Error(ErrorCode::ShapeMismatch, "data has " + std::to_string(ds.data.size()) + " values, expected " +
                                              std::to_string(want));
  }
  for (double v : ds.data) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteState, "dataset contains non-finite values");
  }
  if (ds.adjacency) {
    if (ds.adjacency->size() != ds.nodes * ds.nodes) throw Error(ErrorCode::ShapeMismatch, "adjacency is not N x N");
    for (std::size_t i = 0; i < ds.nodes; ++i) {
      if ((*ds.adjacency)[i * ds.nodes + i] != 0) throw Error(ErrorCode::ShapeMismatch, "adjacency has a self-loop");
    }
  }
  for (const auto& [name, values] : ds.statics) {
    if (values.size() != ds.nodes && values.size() != ds.nodes * ds.trajectories)
      throw Error(ErrorCode::ShapeMismatch, "static '" + name + "' is neither N nor B x N values");
  }
}

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + p.string());
  out << content;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + p.string());
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::size_t parse_index(std::string_view s, std::size_t line) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw Error(ErrorCode::FormatError, "bad integer '" + std::string(s) + "'", line);
  }
  return v;
}

double parse_value(std::string_view s, std::size_t line) {
  double v = 0.0;
  if (!parse_double(s, v) || !std::isfinite(v)) {
    throw Error(ErrorCode::FormatError, "bad value '" + std::string(s) + "'", line);
  }
  return v;
}

struct Row {
  std::size_t traj, t, node, channel;
  double value;
};

// Every line must be complete: a trailing newline is required after the last
// row so a file cut at a line boundary is still detected by the row count and
// a file cut mid-line is detected here.
std::vector<Row> parse_trajectory_rows(const std::string& text) {
  std::vector<Row> rows;
  std::size_t line_no = 1;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) throw Error(ErrorCode::FormatError, "unterminated last line", line_no);
    std::string_view line(text.data() + pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = nl + 1;
    if (header) {
      if (line != "traj,t,node,channel,value") {
        throw Error(ErrorCode::FormatError, "expected header traj,t,node,channel,value", line_no);
      }
      header = false;
      ++line_no;
      continue;
    }
    const auto cols = split(line, ',');
    if (cols.size() != 5) throw Error(ErrorCode::FormatError, "expected 5 columns", line_no);
    rows.push_back({parse_index(cols[0], line_no), parse_index(cols[1], line_no), parse_index(cols[2], line_no),
                    parse_index(cols[3], line_no), parse_value(cols[4], line_no)});
    ++line_no;
  }
  if (header) throw Error(ErrorCode::FormatError, "empty trajectory file", 1);
  return rows;
}

void fill_grid(TrajectoryDataset& ds, const std::vector<Row>& rows) {
  const std::size_t want = ds.trajectories * ds.steps * ds.nodes * ds.channels;
  if (rows.size() != want) {
    throw Error(ErrorCode::FormatError,
                "expected " + std::to_string(want) + " rows, found " + std::to_string(rows.size()), rows.size() + 1);
  }
  ds.data.assign(want, 0.0);
  std::vector<std::uint8_t> seen(want, 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Row& row = rows[r];
    if (row.traj >= ds.trajectories || row.t >= ds.steps || row.node >= ds.nodes || row.channel >= ds.channels) {
      throw Error(ErrorCode::FormatError, "index out of range", r + 2);
    }
    const std::size_t k = ((row.traj * ds.steps + row.t) * ds.nodes + row.node) * ds.channels + row.channel;
    if (seen[k]) throw Error(ErrorCode::FormatError, "duplicate cell", r + 2);
    seen[k] = 1;
    ds.data[k] = row.value;
  }
}

}  // namespace

std::string trajectories_csv(const TrajectoryDataset& ds) {
  std::string out = "traj,t,node,channel,value\n";
  out.reserve(out.size() + ds.data.size() * 24);
  std::size_t k = 0;
  for (std::size_t b = 0; b < ds.trajectories; ++b)
    for (std::size_t t = 0; t < ds.steps; ++t)
      for (std::size_t n = 0; n < ds.nodes; ++n)
        for (std::size_t d = 0; d < ds.channels; ++d) {
          out += std::to_string(b);
          out += ',';
          out += std::to_string(t);
          out += ',';
          out += std::to_string(n);
          out += ',';
          out += std::to_string(d);
          out += ',';
          out += format_double(ds.data[k++]);
          out += '\n';
        }
  return out;
}

void save_dataset(const TrajectoryDataset& ds, const fs::path& dir) {
  check_dataset(ds);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());

  const std::string traj = trajectories_csv(ds);
  write_file(dir / "trajectories.csv", traj);

  if (ds.adjacency) {
    std::string adj = "i,j,value\n";
    for (std::size_t i = 0; i < ds.nodes; ++i)
      for (std::size_t j = 0; j < ds.nodes; ++j)
        adj += std::to_string(i) + "," + std::to_string(j) + "," +
               std::to_string(static_cast<int>((*ds.adjacency)[i * ds.nodes + j])) + "\n";
    write_file(dir / "adjacency.csv", adj);
  } else {
    fs::remove(dir / "adjacency.csv", ec);
  }

  nlohmann::ordered_json meta;
  meta["format_version"] = 1;
  meta["system"] = ds.system;
  meta["seed"] = ds.seed;
  meta["dt"] = ds.dt;
  meta["trajectories"] = ds.trajectories;
  meta["steps"] = ds.steps;
  meta["nodes"] = ds.nodes;
  meta["channels"] = ds.channels;
  meta["has_adjacency"] = ds.adjacency.has_value();
  nlohmann::ordered_json statics = nlohmann::ordered_json::object();
  for (const auto& [name, values] : ds.statics) {
    // Statics are written as strings so they round-trip bit-exactly.
    auto arr = nlohmann::ordered_json::array();
    for (double v : values) arr.push_back(format_double(v));
    statics[name] = std::move(arr);
  }
  meta["statics"] = std::move(statics);
  meta["provenance"] = nlohmann::ordered_json::parse(ds.provenance_json);
  meta["trajectories_checksum"] = fnv1a_hex(traj);
  write_file(dir / "meta.json", meta.dump(2) + "\n");
}

TrajectoryDataset load_dataset(const fs::path& path) {
  TrajectoryDataset ds;
  if (fs::is_regular_file(path)) {
    // Bare CSV: infer the grid from the largest indices.
    const auto rows = parse_trajectory_rows(read_file(path));
    if (rows.empty()) throw Error(ErrorCode::FormatError, "no rows", 2);
    for (const Row& r : rows) {
      ds.trajectories = std::max(ds.trajectories, r.traj + 1);
      ds.steps = std::max(ds.steps, r.t + 1);
      ds.nodes = std::max(ds.nodes, r.node + 1);
      ds.channels = std::max(ds.channels, r.channel + 1);
    }
    fill_grid(ds, rows);
    ds.system = "external";
    ds.provenance_json = json{{"source", path.filename().string()}}.dump();
    return ds;
  }
  if (!fs::is_directory(path)) throw Error(ErrorCode::IoError, "no dataset at " + path.string());

  json meta;
  try {
    meta = json::parse(read_file(path / "meta.json"));
    ds.system = meta.at("system").get<std::string>();
    ds.seed = meta.at("seed").get<std::uint64_t>();
    ds.dt = meta.at("dt").get<double>();
    ds.trajectories = meta.at("trajectories").get<std::size_t>();
    ds.steps = meta.at("steps").get<std::size_t>();
    ds.nodes = meta.at("nodes").get<std::size_t>();
    ds.channels = meta.at("channels").get<std::size_t>();
    for (const auto& [name, arr] : meta.at("statics").items()) {
      std::vector<double> values;
      for (const auto& v : arr) values.push_back(parse_value(v.get<std::string>(), 0));
      ds.statics[name] = std::move(values);
    }
    // Re-parse ordered so that saving a loaded dataset reproduces meta.json.
    const auto ordered = nlohmann::ordered_json::parse(read_file(path / "meta.json"));
    ds.provenance_json = ordered.value("provenance", nlohmann::ordered_json::object()).dump();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("meta.json: ") + e.what());
  }

  const std::string traj = read_file(path / "trajectories.csv");
  fill_grid(ds, parse_trajectory_rows(traj));
  const std::string expected = meta.value("trajectories_checksum", "");
  if (!expected.empty() && fnv1a_hex(traj) != expected) {
    throw Error(ErrorCode::ChecksumMismatch, "trajectories.csv does not match meta.json");
  }

  if (meta.value("has_adjacency", false)) {
    const std::string text = read_file(path / "adjacency.csv");
    std::vector<std::uint8_t> adj(ds.nodes * ds.nodes, 0);
    std::vector<std::uint8_t> seen(ds.nodes * ds.nodes, 0);
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::size_t count = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line_no == 1) {
        if (line != "i,j,value") throw Error(ErrorCode::FormatError, "adjacency.csv: bad header", 1);
        continue;
      }
      const auto cols = split(line, ',');
      if (cols.size() != 3) throw Error(ErrorCode::FormatError, "adjacency.csv: expected 3 columns", line_no);
      const std::size_t i = parse_index(cols[0], line_no);
      const std::size_t j = parse_index(cols[1], line_no);
      const std::size_t v = parse_index(cols[2], line_no);
      if (i >= ds.nodes || j >= ds.nodes || v > 1 || seen[i * ds.nodes + j]) {
        throw Error(ErrorCode::FormatError, "adjacency.csv: bad entry", line_no);
      }
      seen[i * ds.nodes + j] = 1;
      adj[i * ds.nodes + j] = static_cast<std::uint8_t>(v);
      ++count;
    }
    if (count != ds.nodes * ds.nodes) throw Error(ErrorCode::FormatError, "adjacency.csv: incomplete", line_no);
    ds.adjacency = std::move(adj);
  }
  check_dataset(ds);
  return ds;
}

}  // namespace cosine
