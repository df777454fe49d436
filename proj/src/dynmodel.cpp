#include "cosine/dynmodel.hpp"

#include "cosine/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

namespace cosine {

using expr::Variable;

void validate_config(const TrainConfig& c) {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::ConfigError, what); };
  if (!(c.tau > 0.0)) bad("tau must be positive");
  if (!(c.beta_kl >= 0.0) || !(c.lambda_w >= 0.0)) bad("regularizer weights must be >= 0");
  if (!(c.sigma >= 0.0)) bad("sigma must be >= 0 (0 selects the automatic scale)");
  if (!(c.lr > 0.0) || !(c.lr_a > 0.0)) bad("learning rates must be positive");
  if (c.batch_size == 0) bad("batch_size must be positive");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) bad("val_fraction must lie in (0, 1)");
  if (!(c.prior_r > 0.0 && c.prior_r < 1.0)) bad("prior_r must lie in (0, 1)");
  if (!(c.init_psi_std >= 0.0) || !(c.init_w_std >= 0.0)) bad("init scales must be >= 0");
}

namespace {

void fill_normal(std::vector<double>& v, Rng& rng, double sd) {
  for (double& x : v) x = sd > 0.0 ? normal(rng, 0.0, sd) : 0.0;
}

void fresh_coefficients(ModelState& s, const BasisLibrary& lib, std::size_t D, const TrainConfig& cfg, Rng& rng) {
  s.library = lib;
  s.coeffs.M = lib.message_terms.size();
  s.coeffs.U = lib.update_terms.size();
  s.coeffs.D = D;
  s.coeffs.w_msg.assign(s.coeffs.M * D, 0.0);
  s.coeffs.w_upd.assign(s.coeffs.U * D, 0.0);
  fill_normal(s.coeffs.w_msg, rng, cfg.init_w_std);
  fill_normal(s.coeffs.w_upd, rng, cfg.init_w_std);
  s.adam_psi.reset(s.logits.psi.size());
  s.adam_msg.reset(s.coeffs.w_msg.size());
  s.adam_upd.reset(s.coeffs.w_upd.size());
  s.step = 0;
}

}  // namespace

ModelState init_state(const BasisLibrary& lib, std::size_t nodes, std::size_t channels, const TrainConfig& cfg,
                      Rng& rng) {
  ModelState s;
  s.logits = EdgeLogits::zeros(nodes);
  fill_normal(s.logits.psi, rng, cfg.init_psi_std);
  fresh_coefficients(s, lib, channels, cfg, rng);
  return s;
}

void rebind_library(ModelState& s, const BasisLibrary& lib, const TrainConfig& cfg, Rng& rng) {
  if (!cfg.warm_start) fill_normal(s.logits.psi, rng, cfg.init_psi_std);
  fresh_coefficients(s, lib, s.coeffs.D, cfg, rng);
}

std::vector<double> message_features(const BasisLibrary& lib, std::span<const double> x, std::size_t B,
                                     std::size_t N, std::size_t D) {
  if (x.size() != B * N * D) throw Error(ErrorCode::ShapeMismatch, "x is not B x N x D");
  const std::size_t M = lib.message_terms.size();
  const std::size_t S = B * N * N;
  std::vector<double> xi(S * D), xj(S * D), diff(S * D);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        const std::size_t s = (b * N + i) * N + j;
        for (std::size_t d = 0; d < D; ++d) {
          const double a = x[(b * N + i) * D + d];
          const double c = x[(b * N + j) * D + d];
          xi[s * D + d] = a;
          xj[s * D + d] = c;
          diff[s * D + d] = c - a;
        }
      }
  expr::SiteBatch sb;
  sb.sites = S;
  sb.channels = D;
  sb.bind(Variable::Xi, xi);
  sb.bind(Variable::Xj, xj);
  sb.bind(Variable::Diff, diff);
  std::vector<double> out(S * M * D);
  for (std::size_t m = 0; m < M; ++m) {
    const auto r = expr::eval_batch(lib.message_terms[m].expr, sb);
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t d = 0; d < D; ++d) out[(s * M + m) * D + d] = r.value[s * r.width + (r.width == 1 ? 0 : d)];
  }
  return out;
}

namespace {

ForwardResult forward_core(const ModelState& st, Batch& batch, AdjacencySample sample, bool fixed) {
  const std::size_t B = batch.size;
  const std::size_t N = st.nodes();
  const std::size_t D = st.channels();
  const std::size_t M = st.coeffs.M;
  const std::size_t U = st.coeffs.U;
  if (batch.x.size() != B * N * D) throw Error(ErrorCode::ShapeMismatch, "batch x is not B x N x D");
  if (sample.adjacency.nodes != N || sample.adjacency.a.size() != N * N) {
    throw Error(ErrorCode::ShapeMismatch, "adjacency is not N x N");
  }
  if (batch.features.empty()) batch.features = message_features(st.library, batch.x, B, N, D);
  if (batch.features.size() != B * N * N * M * D) throw Error(ErrorCode::ShapeMismatch, "message feature size");

  ForwardResult out;
  ForwardCache& c = out.cache;
  c.B = B;
  c.N = N;
  c.D = D;
  c.M = M;
  c.U = U;
  c.adjacency_fixed = fixed;
  c.tau = sample.cache.tau;
  c.x = batch.x;
  c.features = batch.features;
  const auto& A = sample.adjacency.a;
  const double* W = st.coeffs.w_msg.data();

  c.e.assign(B * N * N * D, 0.0);
  c.h.assign(B * N * D, 0.0);
  c.k.assign(N, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) c.k[i] += A[i * N + j];

  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i) {
      double* hi = c.h.data() + (b * N + i) * D;
      for (std::size_t j = 0; j < N; ++j) {
        const std::size_t s = (b * N + i) * N + j;
        const double* f = c.features.data() + s * M * D;
        double* e = c.e.data() + s * D;
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t d = 0; d < D; ++d) e[d] += W[m * D + d] * f[m * D + d];
        const double a = A[i * N + j];
        if (i != j)
          for (std::size_t d = 0; d < D; ++d) hi[d] += a * e[d];
      }
    }

  std::vector<double> deg(B * N);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i) deg[b * N + i] = c.k[i];
  expr::SiteBatch sb;
  sb.sites = B * N;
  sb.channels = D;
  sb.bind(Variable::X, c.x);
  sb.bind(Variable::H, c.h);
  sb.bind(Variable::Deg, deg);
  const Variable wrt[] = {Variable::H, Variable::Deg};

  out.pred = c.x;
  const double* Wu = st.coeffs.w_upd.data();
  c.upd_width.resize(U);
  c.upd_value.resize(U);
  c.upd_jac.resize(U);
  for (std::size_t n = 0; n < U; ++n) {
    auto r = expr::eval_batch(st.library.update_terms[n].expr, sb, wrt);
    c.upd_width[n] = r.width;
    for (std::size_t s = 0; s < B * N; ++s)
      for (std::size_t d = 0; d < D; ++d)
        out.pred[s * D + d] += Wu[n * D + d] * r.value[s * r.width + (r.width == 1 ? 0 : d)];
    c.upd_value[n] = std::move(r.value);
    c.upd_jac[n] = std::move(r.jacobian);
  }
  c.adjacency = std::move(sample);
  return out;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

ForwardResult forward(const ModelState& st, Batch& batch, double tau, Rng& rng, bool with_noise) {
  return forward_core(st, batch, sample_soft_adjacency(st.logits, tau, rng, with_noise), false);
}

ForwardResult forward_sampled(const ModelState& st, Batch& batch, AdjacencySample sample) {
  return forward_core(st, batch, std::move(sample), false);
}

ForwardResult forward_with_adjacency(const ModelState& st, Batch& batch, const SoftAdjacency& adjacency) {
  AdjacencySample s;
  s.adjacency = adjacency;
  for (std::size_t i = 0; i < adjacency.nodes; ++i) s.adjacency.a[i * adjacency.nodes + i] = 0.0;
  return forward_core(st, batch, std::move(s), true);
}

LossParts loss(std::span<const double> pred, std::span<const double> target, std::size_t batch,
               const ModelState& st, const TrainConfig& cfg) {
  if (pred.size() != target.size()) throw Error(ErrorCode::ShapeMismatch, "pred and target differ in size");
  if (!(cfg.sigma > 0.0)) throw Error(ErrorCode::ConfigError, "loss needs a resolved positive sigma");
  LossParts p;
  double sse = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double r = pred[k] - target[k];
    sse += r * r;
  }
  p.nll = 0.5 * sse / (cfg.sigma * cfg.sigma) / static_cast<double>(std::max<std::size_t>(batch, 1));
  p.kl = kl_to_prior(st.logits, GraphPrior{cfg.prior_r});
  for (double w : st.coeffs.w_msg) p.l1 += std::fabs(w);
  for (double w : st.coeffs.w_upd) p.l1 += std::fabs(w);
  p.total = p.nll + cfg.beta_kl * p.kl + cfg.lambda_w * p.l1;
  return p;
}

std::vector<double> nll_gradient(std::span<const double> pred, std::span<const double> target, std::size_t batch,
                                 double sigma) {
  if (!(sigma > 0.0)) throw Error(ErrorCode::ConfigError, "nll gradient needs a positive sigma");
  std::vector<double> g(pred.size());
  const double scale = 1.0 / (sigma * sigma * static_cast<double>(std::max<std::size_t>(batch, 1)));
  for (std::size_t k = 0; k < pred.size(); ++k) g[k] = (pred[k] - target[k]) * scale;
  return g;
}

Gradients backward(ForwardCache& c, std::span<const double> dpred, const ModelState& st, const TrainConfig& cfg) {
  if (c.consumed) throw Error(ErrorCode::CacheConsumed, "forward cache already used by a backward pass");
  c.consumed = true;
  const std::size_t B = c.B, N = c.N, D = c.D, M = c.M, U = c.U;
  const std::size_t P = D + 1;
  if (dpred.size() != B * N * D) throw Error(ErrorCode::ShapeMismatch, "upstream gradient is not B x N x D");

  Gradients g;
  g.w_msg.assign(M * D, 0.0);
  g.w_upd.assign(U * D, 0.0);
  g.psi.assign(st.logits.psi.size(), 0.0);

  // Update stream: coefficient gradients, then pull back into h and k.
  std::vector<double> gh(B * N * D, 0.0);
  std::vector<double> gk(B * N, 0.0);
  const double* Wu = st.coeffs.w_upd.data();
  for (std::size_t n = 0; n < U; ++n) {
    const std::size_t w = c.upd_width[n];
    const auto& val = c.upd_value[n];
    const auto& jac = c.upd_jac[n];
    for (std::size_t s = 0; s < B * N; ++s) {
      const double* up = dpred.data() + s * D;
      if (w == 1) {
        double dg = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
          g.w_upd[n * D + d] += up[d] * val[s];
          dg += Wu[n * D + d] * up[d];
        }
        const double* J = jac.data() + s * P;
        for (std::size_t q = 0; q < D; ++q) gh[s * D + q] += dg * J[q];
        gk[s] += dg * J[D];
      } else {
        for (std::size_t d = 0; d < D; ++d) {
          g.w_upd[n * D + d] += up[d] * val[s * D + d];
          const double dg = Wu[n * D + d] * up[d];
          if (dg == 0.0) continue;
          const double* J = jac.data() + (s * D + d) * P;
          for (std::size_t q = 0; q < D; ++q) gh[s * D + q] += dg * J[q];
          gk[s] += dg * J[D];
        }
      }
    }
  }

  // Aggregation and message stream.
  const auto& A = c.adjacency.adjacency.a;
  std::vector<double> dA(N * N, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i) {
      const double* ghi = gh.data() + (b * N + i) * D;
      const double gki = gk[b * N + i];
      for (std::size_t j = 0; j < N; ++j) {
        if (i == j) continue;
        const std::size_t s = (b * N + i) * N + j;
        const double* e = c.e.data() + s * D;
        double acc = gki;
        for (std::size_t d = 0; d < D; ++d) acc += ghi[d] * e[d];
        dA[i * N + j] += acc;
        const double a = A[i * N + j];
        if (a == 0.0) continue;
        const double* f = c.features.data() + s * M * D;
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t d = 0; d < D; ++d) g.w_msg[m * D + d] += a * ghi[d] * f[m * D + d];
      }
    }

  if (!c.adjacency_fixed) g.psi = adjacency_backward(dA, st.logits, c.tau, c.adjacency.cache);

  // Regularizers.
  if (cfg.beta_kl != 0.0) {
    std::vector<double> gkl(st.logits.psi.size(), 0.0);
    kl_to_prior(st.logits, GraphPrior{cfg.prior_r}, &gkl);
    for (std::size_t p = 0; p < gkl.size(); ++p) g.psi[p] += cfg.beta_kl * gkl[p];
  }
  for (std::size_t k = 0; k < g.w_msg.size(); ++k) g.w_msg[k] += cfg.lambda_w * sign(st.coeffs.w_msg[k]);
  for (std::size_t k = 0; k < g.w_upd.size(); ++k) g.w_upd[k] += cfg.lambda_w * sign(st.coeffs.w_upd[k]);
  return g;
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void adam_update(std::vector<double>& param, const std::vector<double>& grad, AdamMoments& mom, double lr,
                 std::uint64_t step) {
  if (mom.m.size() != param.size()) mom.reset(param.size());
  if (grad.size() != param.size()) throw Error(ErrorCode::ShapeMismatch, "gradient shape");
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
  for (std::size_t k = 0; k < param.size(); ++k) {
    mom.m[k] = kBeta1 * mom.m[k] + (1.0 - kBeta1) * grad[k];
    mom.v[k] = kBeta2 * mom.v[k] + (1.0 - kBeta2) * grad[k] * grad[k];
    const double mhat = mom.m[k] / c1;
    const double vhat = mom.v[k] / c2;
    param[k] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
  }
}

}  // namespace

void adam_step(ModelState& st, const Gradients& g, const TrainConfig& cfg) {
  ++st.step;
  adam_update(st.logits.psi, g.psi, st.adam_psi, cfg.lr_a, st.step);
  adam_update(st.coeffs.w_msg, g.w_msg, st.adam_msg, cfg.lr, st.step);
  adam_update(st.coeffs.w_upd, g.w_upd, st.adam_upd, cfg.lr, st.step);
}

// ─────────────────────────────── training ───────────────────────────────

namespace {

struct Pair {
  std::size_t traj, t;
};

struct Split {
  std::vector<Pair> train, val;
};

Split split_pairs(const TrajectoryDataset& data, double val_fraction) {
  Split s;
  const std::size_t B = data.trajectories;
  const std::size_t T = data.steps;
  if (B >= 2) {
    auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(B) * val_fraction));
    n_val = std::clamp<std::size_t>(n_val, 1, B - 1);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t + 1 < T; ++t) (b < B - n_val ? s.train : s.val).push_back({b, t});
  } else {
    // One trajectory: hold out its final transitions instead.
    const std::size_t pairs = T - 1;
    auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(pairs) * val_fraction));
    n_val = std::clamp<std::size_t>(n_val, 1, pairs - 1);
    for (std::size_t t = 0; t < pairs; ++t) (t < pairs - n_val ? s.train : s.val).push_back({0, t});
  }
  return s;
}

class Trainer {
public:
  Trainer(const TrajectoryDataset& data, const TrainConfig& cfg, const BasisLibrary& lib)
      : data_(data), cfg_(cfg), lib_(lib) {
    N_ = data.nodes;
    D_ = data.channels;
    M_ = lib.message_terms.size();
    per_pair_ = N_ * N_ * M_ * D_;
  }

  // Precomputes message features for every pair when they fit the budget.
  void prepare(const std::vector<Pair>& pairs, std::vector<double>& store) const {
    const double bytes = static_cast<double>(pairs.size()) * static_cast<double>(per_pair_) * 8.0;
    if (bytes > static_cast<double>(cfg_.cache_limit_mb) * 1024.0 * 1024.0) return;
    store.resize(pairs.size() * per_pair_);
    const std::size_t chunk = 64;
    for (std::size_t start = 0; start < pairs.size(); start += chunk) {
      const std::size_t n = std::min(chunk, pairs.size() - start);
      std::vector<double> x(n * N_ * D_);
      for (std::size_t k = 0; k < n; ++k) {
        const double* f = data_.frame(pairs[start + k].traj, pairs[start + k].t);
        std::copy(f, f + N_ * D_, x.begin() + static_cast<std::ptrdiff_t>(k * N_ * D_));
      }
      const auto feats = message_features(lib_, x, n, N_, D_);
      std::copy(feats.begin(), feats.end(), store.begin() + static_cast<std::ptrdiff_t>(start * per_pair_));
    }
  }

  Batch assemble(const std::vector<Pair>& pairs, const std::vector<double>& store,
                 std::span<const std::size_t> idx) const {
    Batch b;
    b.size = idx.size();
    const std::size_t F = N_ * D_;
    b.x.resize(b.size * F);
    b.target.resize(b.size * F);
    for (std::size_t k = 0; k < b.size; ++k) {
      const Pair& p = pairs[idx[k]];
      const double* x0 = data_.frame(p.traj, p.t);
      const double* x1 = data_.frame(p.traj, p.t + 1);
      std::copy(x0, x0 + F, b.x.begin() + static_cast<std::ptrdiff_t>(k * F));
      std::copy(x1, x1 + F, b.target.begin() + static_cast<std::ptrdiff_t>(k * F));
    }
    if (!store.empty()) {
      b.features.resize(b.size * per_pair_);
      for (std::size_t k = 0; k < b.size; ++k) {
        const auto src = store.begin() + static_cast<std::ptrdiff_t>(idx[k] * per_pair_);
        std::copy(src, src + static_cast<std::ptrdiff_t>(per_pair_),
                  b.features.begin() + static_cast<std::ptrdiff_t>(k * per_pair_));
      }
    }
    return b;
  }

  // Mean noiseless L_nll over `pairs`; optionally collects residuals.
  double evaluate(const ModelState& st, const std::vector<Pair>& pairs, const std::vector<double>& store,
                  std::vector<double>* residuals) const {
    const AdjacencySample base = soft_adjacency_with_noise(st.logits, cfg_.tau, {});
    double sse = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < pairs.size(); start += cfg_.batch_size) {
      const std::size_t n = std::min(cfg_.batch_size, pairs.size() - start);
      idx.resize(n);
      for (std::size_t k = 0; k < n; ++k) idx[k] = start + k;
      Batch b = assemble(pairs, store, idx);
      const auto r = forward_sampled(st, b, base);
      for (std::size_t k = 0; k < r.pred.size(); ++k) {
        const double d = r.pred[k] - b.target[k];
        sse += d * d;
        if (residuals) residuals->push_back(d);
      }
    }
    return 0.5 * sse / (cfg_.sigma * cfg_.sigma) / static_cast<double>(pairs.size());
  }

private:
  const TrajectoryDataset& data_;
  const TrainConfig& cfg_;
  const BasisLibrary& lib_;
  std::size_t N_ = 0, D_ = 0, M_ = 0, per_pair_ = 0;
};

double regularizer(const ModelState& st, const TrainConfig& cfg, double* kl_out, double* l1_out) {
  const double kl = kl_to_prior(st.logits, GraphPrior{cfg.prior_r});
  double l1 = 0.0;
  for (double w : st.coeffs.w_msg) l1 += std::fabs(w);
  for (double w : st.coeffs.w_upd) l1 += std::fabs(w);
  if (kl_out) *kl_out = kl;
  if (l1_out) *l1_out = l1;
  return cfg.beta_kl * kl + cfg.lambda_w * l1;
}

double auto_sigma(const TrajectoryDataset& data, const std::vector<Pair>& pairs) {
  const std::size_t width = data.nodes * data.channels;
  double ss = 0.0;
  for (const auto& p : pairs) {
    const double* a = data.frame(p.traj, p.t);
    const double* b = data.frame(p.traj, p.t + 1);
    for (std::size_t k = 0; k < width; ++k) ss += (b[k] - a[k]) * (b[k] - a[k]);
  }
  const double rms = std::sqrt(ss / static_cast<double>(std::max<std::size_t>(pairs.size() * width, 1)));
  // frozen data: any positive scale gives the same optimum
  return rms > 0.0 && std::isfinite(rms) ? kAutoSigmaFraction * rms : 1.0;
}

void diverged_if(bool bad, std::size_t epoch) {
  if (bad) throw Error(ErrorCode::DivergedLoss, "loss became non-finite in epoch " + std::to_string(epoch));
}

}  // namespace

TrainResult train_inner(const TrajectoryDataset& data, const BasisLibrary& lib, const TrainConfig& user_cfg,
                        const ModelState* warm) {
  validate_config(user_cfg);
  check_dataset(data);
  if (data.steps < 2 || data.trajectories == 0 || data.nodes < 2) {
    throw Error(ErrorCode::EmptyDataset, "need at least two frames per trajectory and two nodes");
  }
  if (data.trajectories == 1 && data.steps < 3) {
    throw Error(ErrorCode::EmptyDataset, "a single trajectory needs at least three frames to split");
  }
  validate_library(lib, data.channels, std::max({lib.message_terms.size(), lib.update_terms.size(), std::size_t{1}}));

  TrainConfig cfg = user_cfg;
  Rng init_rng(derive_seed(cfg.seed, 1));
  Rng order_rng(derive_seed(cfg.seed, 2));
  Rng noise_rng(derive_seed(cfg.seed, 3));

  ModelState st = init_state(lib, data.nodes, data.channels, cfg, init_rng);
  if (warm && cfg.warm_start) {
    if (warm->nodes() != data.nodes) throw Error(ErrorCode::ShapeMismatch, "warm-start logits have the wrong size");
    st.logits = warm->logits;
  }

  const Split split = split_pairs(data, cfg.val_fraction);
  if (cfg.sigma == 0.0) cfg.sigma = auto_sigma(data, split.train);
  Trainer trainer(data, cfg, lib);
  std::vector<double> train_store, val_store;
  trainer.prepare(split.train, train_store);
  trainer.prepare(split.val, val_store);

  InnerMetrics metrics;
  metrics.sigma = cfg.sigma;
  {
    LossRow row;
    row.epoch = 0;
    row.nll = trainer.evaluate(st, split.train, train_store, nullptr);
    row.total = row.nll + regularizer(st, cfg, &row.kl, &row.l1);
    row.val_nll = trainer.evaluate(st, split.val, val_store, nullptr);
    row.val_total = row.val_nll + cfg.beta_kl * row.kl + cfg.lambda_w * row.l1;
    diverged_if(!std::isfinite(row.total) || !std::isfinite(row.val_total), 0);
    metrics.curve.push_back(row);
  }
  ModelState best = st;
  double best_val = metrics.curve[0].val_total;
  metrics.best_epoch = 0;

  std::vector<std::size_t> order(split.train.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[uniform_index(order_rng, k)]);
    LossRow row;
    row.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      Batch b = trainer.assemble(split.train, train_store, std::span(order).subspan(start, n));
      auto fr = forward(st, b, cfg.tau, noise_rng, true);
      const LossParts lp = loss(fr.pred, b.target, b.size, st, cfg);
      diverged_if(!std::isfinite(lp.total), epoch);
      const auto grads = backward(fr.cache, nll_gradient(fr.pred, b.target, b.size, cfg.sigma), st, cfg);
      adam_step(st, grads, cfg);
      row.total += lp.total;
      row.nll += lp.nll;
      row.kl += lp.kl;
      row.l1 += lp.l1;
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    row.total /= nb;
    row.nll /= nb;
    row.kl /= nb;
    row.l1 /= nb;
    row.val_nll = trainer.evaluate(st, split.val, val_store, nullptr);
    row.val_total = row.val_nll + regularizer(st, cfg, nullptr, nullptr);
    diverged_if(!std::isfinite(row.val_total), epoch);
    metrics.curve.push_back(row);
    if (row.val_total < best_val) {
      best_val = row.val_total;
      best = st;
      metrics.best_epoch = epoch;
    }
  }

  std::vector<double> residuals;
  metrics.val_nll = trainer.evaluate(best, split.val, val_store, &residuals);
  metrics.val_total = metrics.val_nll + regularizer(best, cfg, nullptr, nullptr);
  metrics.residuals = summarize_residuals(residuals, data.nodes, data.channels);
  const std::size_t D = data.channels;
  for (std::size_t m = 0; m < best.coeffs.M; ++m)
    metrics.msg_mean_abs.push_back(mean_abs(std::span(best.coeffs.w_msg).subspan(m * D, D)));
  for (std::size_t n = 0; n < best.coeffs.U; ++n)
    metrics.upd_mean_abs.push_back(mean_abs(std::span(best.coeffs.w_upd).subspan(n * D, D)));
  return {std::move(best), std::move(metrics)};
}

std::vector<double> rollout(const ModelState& st, std::span<const double> x0, std::size_t steps, double tau) {
  const std::size_t F = st.nodes() * st.channels();
  if (x0.size() != F) throw Error(ErrorCode::ShapeMismatch, "x0 is not N x D");
  std::vector<double> out(x0.begin(), x0.end());
  out.reserve((steps + 1) * F);
  const AdjacencySample base = soft_adjacency_with_noise(st.logits, tau, {});
  for (std::size_t t = 0; t < steps; ++t) {
    Batch b;
    b.size = 1;
    b.x.assign(out.end() - static_cast<std::ptrdiff_t>(F), out.end());
    const auto r = forward_sampled(st, b, base);
    out.insert(out.end(), r.pred.begin(), r.pred.end());
  }
  return out;
}

std::string loss_curve_csv(const std::vector<LossRow>& curve) {
  std::string out = "epoch,L_total,L_nll,L_A,L_W,val_L_total,val_L_nll\n";
  for (const LossRow& r : curve) {
    out += std::to_string(r.epoch);
    for (double v : {r.total, r.nll, r.kl, r.l1, r.val_total, r.val_nll}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

std::string checkpoint_json(const ModelState& st, const TrainConfig& cfg, const InnerMetrics* metrics) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["nodes"] = st.nodes();
  j["channels"] = st.channels();
  j["step"] = st.step;
  j["config"] = {{"tau", cfg.tau},
                 {"beta_kl", cfg.beta_kl},
                 {"lambda_w", cfg.lambda_w},
                 {"sigma", cfg.sigma},
                 {"lr", cfg.lr},
                 {"lr_a", cfg.lr_a},
                 {"epochs", cfg.epochs},
                 {"batch_size", cfg.batch_size},
                 {"seed", cfg.seed},
                 {"val_fraction", cfg.val_fraction},
                 {"prior_r", cfg.prior_r},
                 {"warm_start", cfg.warm_start},
                 {"init_psi_std", cfg.init_psi_std},
                 {"init_w_std", cfg.init_w_std}};
  j["library"] = nlohmann::ordered_json::parse(library_to_json(st.library));
  j["psi"] = st.logits.psi;
  j["w_msg"] = st.coeffs.w_msg;
  j["w_upd"] = st.coeffs.w_upd;
  if (metrics) {
    j["metrics"] = {{"val_total", metrics->val_total},
                    {"val_nll", metrics->val_nll},
                    {"best_epoch", metrics->best_epoch},
                    {"sigma", metrics->sigma}};
  }
  return j.dump(2) + "\n";
}

ModelState load_checkpoint(const std::string& text, TrainConfig* cfg) {
  try {
    const auto j = nlohmann::json::parse(text);
    const std::size_t N = j.at("nodes").get<std::size_t>();
    const std::size_t D = j.at("channels").get<std::size_t>();
    ModelState st;
    st.library = parse_library_json(j.at("library").dump(), D,
                                    std::max<std::size_t>(j.at("library").at("message_terms").size(),
                                                          j.at("library").at("update_terms").size()));
    st.logits.nodes = N;
    st.logits.psi = j.at("psi").get<std::vector<double>>();
    st.coeffs.M = st.library.message_terms.size();
    st.coeffs.U = st.library.update_terms.size();
    st.coeffs.D = D;
    st.coeffs.w_msg = j.at("w_msg").get<std::vector<double>>();
    st.coeffs.w_upd = j.at("w_upd").get<std::vector<double>>();
    st.step = j.value("step", std::uint64_t{0});
    if (st.logits.psi.size() != N * N * 2 || st.coeffs.w_msg.size() != st.coeffs.M * D ||
        st.coeffs.w_upd.size() != st.coeffs.U * D) {
      throw Error(ErrorCode::FormatError, "checkpoint tensor shapes disagree with the library");
    }
    st.adam_psi.reset(st.logits.psi.size());
    st.adam_msg.reset(st.coeffs.w_msg.size());
    st.adam_upd.reset(st.coeffs.w_upd.size());
    if (cfg) {
      const auto& c = j.at("config");
      cfg->tau = c.at("tau");
      cfg->beta_kl = c.at("beta_kl");
      cfg->lambda_w = c.at("lambda_w");
      cfg->sigma = c.at("sigma");
      cfg->lr = c.at("lr");
      cfg->lr_a = c.at("lr_a");
      cfg->epochs = c.at("epochs");
      cfg->batch_size = c.at("batch_size");
      cfg->seed = c.at("seed");
      cfg->val_fraction = c.at("val_fraction");
      cfg->prior_r = c.at("prior_r");
      cfg->warm_start = c.at("warm_start");
      cfg->init_psi_std = c.at("init_psi_std");
      cfg->init_w_std = c.at("init_w_std");
    }
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("checkpoint: ") + e.what());
  }
}

}  // namespace cosine
