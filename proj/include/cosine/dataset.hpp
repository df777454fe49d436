#pragma once

// Trajectory datasets and their on-disk directory format:
//   meta.json          shapes, dt, seed, statics, provenance, checksum
//   trajectories.csv   traj,t,node,channel,value
//   adjacency.csv      i,j,value over all ordered pairs (synthetic data only)

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cosine {

struct TrajectoryDataset {
  std::size_t trajectories = 0;  // B
  std::size_t steps = 0;         // T frames per trajectory
  std::size_t nodes = 0;         // N
  std::size_t channels = 0;      // D
  std::vector<double> data;      // B x T x N x D

  std::optional<std::vector<std::uint8_t>> adjacency;  // N x N, zero diagonal
  std::map<std::string, std::vector<double>> statics;  // "omega", "s": N values, or B x N when drawn per trajectory
  double dt = 1.0;              // time between frames
  std::uint64_t seed = 0;
  std::string system = "external";
  std::string provenance_json = "{}";  // generating specs, as a JSON object

  std::size_t frame_size() const { return nodes * channels; }
  const double* frame(std::size_t traj, std::size_t t) const {
    return data.data() + (traj * steps + t) * frame_size();
  }
  double* frame(std::size_t traj, std::size_t t) { return data.data() + (traj * steps + t) * frame_size(); }
};

// Throws Error{ShapeMismatch, NonFiniteState} when the fields disagree.
void check_dataset(const TrajectoryDataset& ds);

void save_dataset(const TrajectoryDataset& ds, const std::filesystem::path& dir);

// Loads a dataset directory, or a bare trajectory CSV (shapes inferred,
// no adjacency). Throws Error{FormatError, ChecksumMismatch, IoError}.
TrajectoryDataset load_dataset(const std::filesystem::path& path);

std::string trajectories_csv(const TrajectoryDataset& ds);

}  // namespace cosine
