#pragma once

// One-step graph dynamics model:
//   e_ij  = sum_m W_msg[m] * phi_m(x_i, x_j)
//   h_i   = sum_j A_ij e_ij,   k_i = sum_j A_ij
//   x'_i  = x_i + sum_n W_upd[n] * psi_n(x_i, h_i, k_i)
// with A the relaxed adjacency drawn from the edge logits, plus its loss,
// hand-written reverse pass, Adam and the inner training loop.

#include "cosine/dataset.hpp"
#include "cosine/graphgen.hpp"
#include "cosine/library.hpp"
#include "cosine/numeric.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cosine {

struct TrainConfig {
  double tau = 0.3;
  double beta_kl = 0.1;
  double lambda_w = 0.1;
  // NLL scale. 0 picks kAutoSigmaFraction times the RMS one-step change of
  // the training pairs, so the likelihood does not depend on the data's units.
  double sigma = 0.0;
  double lr = 0.005;   // coefficients
  double lr_a = 0.1;   // edge logits
  std::size_t epochs = 1000;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  double prior_r = 0.5;
  bool warm_start = true;
  double init_psi_std = 0.1;
  double init_w_std = 0.01;
  std::size_t cache_limit_mb = 512;  // precomputed message features
};

inline constexpr double kAutoSigmaFraction = 0.25;

// Throws Error{ConfigError}.
void validate_config(const TrainConfig& cfg);

struct Coefficients {
  std::size_t M = 0, U = 0, D = 0;
  std::vector<double> w_msg;  // M x D
  std::vector<double> w_upd;  // U x D
};

struct AdamMoments {
  std::vector<double> m, v;
  void reset(std::size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
  }
};

struct ModelState {
  EdgeLogits logits;
  Coefficients coeffs;
  BasisLibrary library;
  AdamMoments adam_psi, adam_msg, adam_upd;
  std::uint64_t step = 0;

  std::size_t nodes() const { return logits.nodes; }
  std::size_t channels() const { return coeffs.D; }
};

ModelState init_state(const BasisLibrary& lib, std::size_t nodes, std::size_t channels, const TrainConfig& cfg,
                      Rng& rng);

// Binds a new library: fresh W and zeroed moments; Psi is kept when
// cfg.warm_start, otherwise redrawn.
void rebind_library(ModelState& state, const BasisLibrary& lib, const TrainConfig& cfg, Rng& rng);

// A set of one-step pairs sharing one adjacency sample.
struct Batch {
  std::size_t size = 0;         // B
  std::vector<double> x;        // B x N x D
  std::vector<double> target;   // B x N x D
  std::vector<double> features; // B x N x N x M x D message features; filled on demand when empty
};

// Message-term values at every ordered pair (scalar terms broadcast to D).
// Layout: B x N(i) x N(j) x M x D.
std::vector<double> message_features(const BasisLibrary& lib, std::span<const double> x, std::size_t batch,
                                     std::size_t nodes, std::size_t channels);

struct ForwardCache {
  std::size_t B = 0, N = 0, D = 0, M = 0, U = 0;
  AdjacencySample adjacency;
  bool adjacency_fixed = false;  // supplied by the caller; no Psi path
  double tau = 0.0;
  std::vector<double> x;         // B x N x D
  std::vector<double> features;  // B x N x N x M x D
  std::vector<double> e;         // B x N x N x D
  std::vector<double> h;         // B x N x D
  std::vector<double> k;         // N
  std::vector<std::size_t> upd_width;         // per update term: 1 or D
  std::vector<std::vector<double>> upd_value;  // per term: (B N) x width
  std::vector<std::vector<double>> upd_jac;    // per term: (B N) x width x (D + 1); columns h..., deg
  bool consumed = false;
};

struct ForwardResult {
  std::vector<double> pred;  // B x N x D
  ForwardCache cache;
};

// Draws one relaxed adjacency (Gumbel noise when with_noise) and runs the model.
ForwardResult forward(const ModelState& state, Batch& batch, double tau, Rng& rng, bool with_noise);
// Same with a given adjacency sample (used to replay fixed noise).
ForwardResult forward_sampled(const ModelState& state, Batch& batch, AdjacencySample sample);
// Same with a caller-fixed adjacency; backward then skips the Psi path.
ForwardResult forward_with_adjacency(const ModelState& state, Batch& batch, const SoftAdjacency& adjacency);

struct LossParts {
  double total = 0.0;
  double nll = 0.0;  // 1/(2 sigma^2) * SSE, averaged over batch elements
  double kl = 0.0;   // L_A
  double l1 = 0.0;   // L_W
};

LossParts loss(std::span<const double> pred, std::span<const double> target, std::size_t batch,
               const ModelState& state, const TrainConfig& cfg);

// dL_nll/dpred for the loss above.
std::vector<double> nll_gradient(std::span<const double> pred, std::span<const double> target, std::size_t batch,
                                 double sigma);

struct Gradients {
  std::vector<double> psi;    // like logits.psi
  std::vector<double> w_msg;  // M x D
  std::vector<double> w_upd;  // U x D
};

// Reverse pass from dL/dpred, plus the KL and L1 regularizer gradients.
// Throws Error{CacheConsumed} on a second call with the same cache.
Gradients backward(ForwardCache& cache, std::span<const double> dpred, const ModelState& state,
                   const TrainConfig& cfg);

void adam_step(ModelState& state, const Gradients& grads, const TrainConfig& cfg);

struct LossRow {
  std::size_t epoch = 0;
  double total = 0.0, nll = 0.0, kl = 0.0, l1 = 0.0;
  double val_total = 0.0, val_nll = 0.0;
};

struct InnerMetrics {
  double val_total = 0.0;
  double val_nll = 0.0;
  std::size_t best_epoch = 0;
  double sigma = 0.0;  // the scale actually used
  std::vector<double> msg_mean_abs;  // per message term, best state
  std::vector<double> upd_mean_abs;
  ResidualSummary residuals;  // validation residuals of the best state
  std::vector<LossRow> curve;
};

struct TrainResult {
  ModelState state;
  InnerMetrics metrics;
};

// Trains on the one-step pairs of the first (1 - val_fraction) of the
// trajectories and keeps the epoch with the lowest validation L_total.
// Throws Error{EmptyDataset, DivergedLoss, ShapeMismatch}.
TrainResult train_inner(const TrajectoryDataset& data, const BasisLibrary& lib, const TrainConfig& cfg,
                        const ModelState* warm = nullptr);

// Noiseless iterated prediction; returns (steps + 1) x N x D.
std::vector<double> rollout(const ModelState& state, std::span<const double> x0, std::size_t steps, double tau);

std::string loss_curve_csv(const std::vector<LossRow>& curve);

std::string checkpoint_json(const ModelState& state, const TrainConfig& cfg, const InnerMetrics* metrics = nullptr);
// Throws Error{FormatError}.
ModelState load_checkpoint(const std::string& text, TrainConfig* cfg = nullptr);

}  // namespace cosine
