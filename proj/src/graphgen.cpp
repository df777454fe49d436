#include "cosine/graphgen.hpp"

#include "cosine/error.hpp"

#include <cmath>
#include <cstring>

namespace cosine {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z))); }

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw Error(ErrorCode::NonPositiveTemperature, "tau = " + std::to_string(tau));
  }
}

}  // namespace

EdgeLogits EdgeLogits::zeros(std::size_t nodes) {
  EdgeLogits l;
  l.nodes = nodes;
  l.psi.assign(nodes * nodes * 2, 0.0);
  return l;
}

std::uint64_t digest_logits(const EdgeLogits& logits) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ logits.nodes;
  for (double v : logits.psi) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = (h ^ bits) * 0x100000001b3ULL;
  }
  return h;
}

double gumbel(Rng& rng) { return -std::log(-std::log(uniform01(rng))); }

AdjacencySample soft_adjacency_with_noise(const EdgeLogits& logits, double tau, std::vector<double> gumbel_noise) {
  check_tau(tau);
  const std::size_t n = logits.nodes;
  if (logits.psi.size() != n * n * 2) throw Error(ErrorCode::ShapeMismatch, "logits are not N x N x 2");
  if (!gumbel_noise.empty() && gumbel_noise.size() != n * n * 2) {
    throw Error(ErrorCode::ShapeMismatch, "noise is not N x N x 2");
  }
  AdjacencySample s;
  s.adjacency.nodes = n;
  s.adjacency.a.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const std::size_t k = i * n + j;
      double z = logits.psi[2 * k + 1] - logits.psi[2 * k];
      if (!gumbel_noise.empty()) z += gumbel_noise[2 * k + 1] - gumbel_noise[2 * k];
      s.adjacency.a[k] = sigmoid(z / tau);
    }
  }
  s.cache.nodes = n;
  s.cache.tau = tau;
  s.cache.with_noise = !gumbel_noise.empty();
  s.cache.gumbel = std::move(gumbel_noise);
  s.cache.a_soft = s.adjacency.a;
  s.cache.logits_digest = digest_logits(logits);
  return s;
}

AdjacencySample sample_soft_adjacency(const EdgeLogits& logits, double tau, Rng& rng, bool with_noise) {
  check_tau(tau);
  std::vector<double> noise;
  if (with_noise) {
    const std::size_t n = logits.nodes;
    noise.assign(n * n * 2, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const std::size_t k = i * n + j;
        noise[2 * k] = gumbel(rng);
        noise[2 * k + 1] = gumbel(rng);
      }
    }
  }
  return soft_adjacency_with_noise(logits, tau, std::move(noise));
}

std::vector<double> adjacency_backward(std::span<const double> upstream, const EdgeLogits& logits, double tau,
                                       const NoiseCache& cache) {
  const std::size_t n = logits.nodes;
  if (cache.nodes != n || cache.tau != tau || cache.a_soft.size() != n * n ||
      cache.logits_digest != digest_logits(logits)) {
    throw Error(ErrorCode::CacheMismatch, "noise cache does not belong to these logits");
  }
  if (upstream.size() != n * n) throw Error(ErrorCode::ShapeMismatch, "upstream is not N x N");
  std::vector<double> grad(n * n * 2, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const std::size_t k = i * n + j;
      const double a = cache.a_soft[k];
      const double g = upstream[k] * a * (1.0 - a) / tau;
      grad[2 * k + 1] = g;
      grad[2 * k] = -g;
    }
  }
  return grad;
}

double kl_to_prior(const EdgeLogits& logits, const GraphPrior& prior, std::vector<double>* grad) {
  if (!(prior.r > 0.0 && prior.r < 1.0)) throw Error(ErrorCode::ConfigError, "prior r must lie in (0, 1)");
  const std::size_t n = logits.nodes;
  if (grad && grad->size() != logits.psi.size()) throw Error(ErrorCode::ShapeMismatch, "gradient buffer size");
  const double log_r = std::log(prior.r);
  const double log_1r = std::log1p(-prior.r);
  const double logit_r = log_r - log_1r;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const std::size_t k = i * n + j;
      const double d = logits.psi[2 * k + 1] - logits.psi[2 * k];
      const double q = sigmoid(d);
      const double log_q = -softplus(-d);
      const double log_1q = -softplus(d);
      total += q * (log_q - log_r) + (1.0 - q) * (log_1q - log_1r);
      if (grad) {
        const double g = q * (1.0 - q) * (d - logit_r);
        (*grad)[2 * k + 1] += g;
        (*grad)[2 * k] -= g;
      }
    }
  }
  // Rounding can leave a tiny negative total when q == r everywhere.
  return std::max(total, 0.0);
}

std::vector<double> edge_scores(const EdgeLogits& logits, double tau) {
  check_tau(tau);
  Rng unused(0);
  return sample_soft_adjacency(logits, tau, unused, false).adjacency.a;
}

}  // namespace cosine
