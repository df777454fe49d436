#pragma once

// Latent edge logits and the Gumbel-Softmax map to a soft adjacency.
//
// Two edge types per ordered pair (0 = no edge, 1 = edge). With two types the
// softmax reduces to a logistic function of the logit difference:
//   A_ij = sigmoid((psi1 + g1 - psi0 - g0) / tau)

#include "cosine/numeric.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace cosine {

struct EdgeLogits {
  std::size_t nodes = 0;
  std::vector<double> psi;  // nodes x nodes x 2; diagonal is ignored

  static EdgeLogits zeros(std::size_t nodes);
  double& at(std::size_t i, std::size_t j, std::size_t type) { return psi[(i * nodes + j) * 2 + type]; }
  double at(std::size_t i, std::size_t j, std::size_t type) const { return psi[(i * nodes + j) * 2 + type]; }
};

// What the backward pass needs from a forward adjacency sample.
struct NoiseCache {
  std::size_t nodes = 0;
  double tau = 0.0;
  bool with_noise = false;
  std::vector<double> gumbel;  // nodes x nodes x 2, empty when noiseless
  std::vector<double> a_soft;  // nodes x nodes
  std::uint64_t logits_digest = 0;
};

struct SoftAdjacency {
  std::size_t nodes = 0;
  std::vector<double> a;  // nodes x nodes, zero diagonal

  double operator()(std::size_t i, std::size_t j) const { return a[i * nodes + j]; }
};

struct AdjacencySample {
  SoftAdjacency adjacency;
  NoiseCache cache;
};

double gumbel(Rng& rng);

// Throws Error{NonPositiveTemperature}.
AdjacencySample sample_soft_adjacency(const EdgeLogits& logits, double tau, Rng& rng, bool with_noise);

// Deterministic variant with caller-supplied noise (nodes x nodes x 2, or
// empty for none). Used to replay a sample exactly.
AdjacencySample soft_adjacency_with_noise(const EdgeLogits& logits, double tau, std::vector<double> gumbel_noise);

// dL/dPsi from dL/dA_soft. Throws Error{CacheMismatch} if the cache came
// from different logits, size or temperature.
std::vector<double> adjacency_backward(std::span<const double> upstream, const EdgeLogits& logits, double tau,
                                       const NoiseCache& cache);

struct GraphPrior {
  double r = 0.5;
};

// Bernoulli KL summed over ordered off-diagonal pairs, using the noiseless
// edge probability q = sigmoid(psi1 - psi0). Adds dKL/dPsi into `grad` when
// non-null (grad must be sized like psi).
double kl_to_prior(const EdgeLogits& logits, const GraphPrior& prior, std::vector<double>* grad = nullptr);

// Noiseless edge probabilities at temperature tau; zero diagonal.
std::vector<double> edge_scores(const EdgeLogits& logits, double tau);

std::uint64_t digest_logits(const EdgeLogits& logits);

}  // namespace cosine
