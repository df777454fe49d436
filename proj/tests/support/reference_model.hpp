#pragma once

// Naive long-double re-implementation of the one-step model loss over a fixed
// pool of smooth basis terms. Written against the model equations directly,
// so it shares no evaluation code with the library beyond term sources.

#include "cosine/dynmodel.hpp"
#include "cosine/library.hpp"
#include "cosine/numeric.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace refmodel {

using LD = long double;
using Vec = std::vector<LD>;

struct MsgTerm {
  std::string source;
  bool scalar;
  std::function<Vec(const Vec& xi, const Vec& xj)> fn;
};

struct UpdTerm {
  std::string source;
  bool scalar;
  std::function<Vec(const Vec& x, const Vec& h, LD deg)> fn;
};

inline Vec map2(const Vec& a, const Vec& b, const std::function<LD(LD, LD)>& f) {
  Vec out(a.size());
  for (std::size_t d = 0; d < a.size(); ++d) out[d] = f(a[d], b[d]);
  return out;
}

inline const std::vector<MsgTerm>& message_pool() {
  static const std::vector<MsgTerm> pool = {
      {"xj - xi", false, [](const Vec& a, const Vec& b) { return map2(a, b, [](LD u, LD v) { return v - u; }); }},
      {"xi * xj", false, [](const Vec& a, const Vec& b) { return map2(a, b, [](LD u, LD v) { return u * v; }); }},
      {"torch.sin(diff)", false,
       [](const Vec& a, const Vec& b) { return map2(a, b, [](LD u, LD v) { return std::sin(v - u); }); }},
      {"torch.tanh(xj)", false,
       [](const Vec& a, const Vec& b) { return map2(a, b, [](LD, LD v) { return std::tanh(v); }); }},
      {"xj / (1 + torch.abs(xj))", false,
       [](const Vec& a, const Vec& b) { return map2(a, b, [](LD, LD v) { return v / (1 + std::fabs(v)); }); }},
      {"torch.norm(diff, dim=-1, keepdim=True)", true,
       [](const Vec& a, const Vec& b) {
         LD s = 0;
         for (std::size_t d = 0; d < a.size(); ++d) s += (b[d] - a[d]) * (b[d] - a[d]);
         return Vec{std::sqrt(s)};
       }},
  };
  return pool;
}

inline const std::vector<UpdTerm>& update_pool() {
  static const std::vector<UpdTerm> pool = {
      {"x", false, [](const Vec& x, const Vec&, LD) { return x; }},
      {"h", false, [](const Vec&, const Vec& h, LD) { return h; }},
      {"h / (deg + 1e-6)", false,
       [](const Vec&, const Vec& h, LD k) {
         Vec o(h);
         for (auto& v : o) v /= (k + 1e-6L);
         return o;
       }},
      {"torch.tanh(h)", false,
       [](const Vec&, const Vec& h, LD) {
         Vec o(h);
         for (auto& v : o) v = std::tanh(v);
         return o;
       }},
      {"x * h", false, [](const Vec& x, const Vec& h, LD) { return map2(x, h, [](LD u, LD v) { return u * v; }); }},
      {"torch.sigmoid(h) * deg", false,
       [](const Vec&, const Vec& h, LD k) {
         Vec o(h);
         for (auto& v : o) v = k / (1 + std::exp(-v));
         return o;
       }},
      {"h[..., 0:1]", true, [](const Vec&, const Vec& h, LD) { return Vec{h[0]}; }},
      {"torch.sin(h + x)", false,
       [](const Vec& x, const Vec& h, LD) { return map2(x, h, [](LD u, LD v) { return std::sin(u + v); }); }},
  };
  return pool;
}

struct Instance {
  std::size_t N = 5, D = 2, B = 2;
  std::vector<std::size_t> msg, upd;  // indices into the pools
  cosine::BasisLibrary library;
  std::vector<double> psi, noise, w_msg, w_upd, x, target;
  double tau = 0.3, beta = 0.1, lambda = 0.1, sigma = 1.0, r = 0.5;
};

inline std::vector<std::size_t> choose(cosine::Rng& rng, std::size_t pool, std::size_t k) {
  std::vector<std::size_t> idx(pool);
  for (std::size_t i = 0; i < pool; ++i) idx[i] = i;
  for (std::size_t i = pool; i > 1; --i) std::swap(idx[i - 1], idx[cosine::uniform_index(rng, i)]);
  idx.resize(k);
  return idx;
}

// Random instance. Coefficients are kept away from zero, where the L1 term
// has its kink and finite differences are meaningless.
inline Instance random_instance(cosine::Rng& rng, std::size_t M = 4, std::size_t U = 4) {
  using namespace cosine;
  Instance in;
  in.msg = choose(rng, message_pool().size(), M);
  in.upd = choose(rng, update_pool().size(), U);
  for (std::size_t k = 0; k < M; ++k) {
    const auto& t = message_pool()[in.msg[k]];
    in.library.message_terms.push_back(make_term("m" + std::to_string(k), t.source,
                                                 t.scalar ? TermKind::Scalar : TermKind::Vector, Stream::Message,
                                                 in.D));
  }
  for (std::size_t k = 0; k < U; ++k) {
    const auto& t = update_pool()[in.upd[k]];
    in.library.update_terms.push_back(make_term("u" + std::to_string(k), t.source,
                                                t.scalar ? TermKind::Scalar : TermKind::Vector, Stream::Update,
                                                in.D));
  }
  const std::size_t N = in.N;
  in.psi.resize(N * N * 2);
  for (double& v : in.psi) v = normal(rng, 0.0, 1.0);
  in.noise.assign(N * N * 2, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j)
      if (i != j) {
        in.noise[(i * N + j) * 2] = gumbel(rng);
        in.noise[(i * N + j) * 2 + 1] = gumbel(rng);
      }
  auto coef = [&](std::size_t n) {
    std::vector<double> w(n);
    for (double& v : w) {
      do v = normal(rng, 0.0, 0.5);
      while (std::fabs(v) < 0.02);
    }
    return w;
  };
  in.w_msg = coef(M * in.D);
  in.w_upd = coef(U * in.D);
  in.x.resize(in.B * N * in.D);
  in.target.resize(in.x.size());
  for (double& v : in.x) v = uniform(rng, -1.0, 1.0);
  for (double& v : in.target) v = uniform(rng, -1.0, 1.0);
  in.r = uniform(rng, 0.2, 0.8);
  return in;
}

// L_total at the given parameters (psi, w_msg, w_upd), everything else from `in`.
inline LD loss(const Instance& in, const std::vector<double>& psi, const std::vector<double>& w_msg,
               const std::vector<double>& w_upd) {
  const std::size_t N = in.N, D = in.D, B = in.B;
  const std::size_t M = in.msg.size(), U = in.upd.size();
  std::vector<LD> A(N * N, 0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      const std::size_t k = i * N + j;
      const LD z = (static_cast<LD>(psi[2 * k + 1]) + in.noise[2 * k + 1] - psi[2 * k] - in.noise[2 * k]) / in.tau;
      A[k] = 1 / (1 + std::exp(-z));
    }
  LD sse = 0;
  for (std::size_t b = 0; b < B; ++b) {
    auto node = [&](std::size_t i) {
      Vec v(D);
      for (std::size_t d = 0; d < D; ++d) v[d] = in.x[(b * N + i) * D + d];
      return v;
    };
    for (std::size_t i = 0; i < N; ++i) {
      const Vec xi = node(i);
      Vec h(D, 0);
      LD deg = 0;
      for (std::size_t j = 0; j < N; ++j) {
        if (j == i) continue;
        const Vec xj = node(j);
        deg += A[i * N + j];
        for (std::size_t m = 0; m < M; ++m) {
          const auto& term = message_pool()[in.msg[m]];
          const Vec f = term.fn(xi, xj);
          for (std::size_t d = 0; d < D; ++d) h[d] += A[i * N + j] * w_msg[m * D + d] * f[term.scalar ? 0 : d];
        }
      }
      for (std::size_t d = 0; d < D; ++d) {
        LD pred = xi[d];
        for (std::size_t n = 0; n < U; ++n) {
          const auto& term = update_pool()[in.upd[n]];
          const Vec g = term.fn(xi, h, deg);
          pred += w_upd[n * D + d] * g[term.scalar ? 0 : d];
        }
        const LD res = pred - in.target[(b * N + i) * D + d];
        sse += res * res;
      }
    }
  }
  const LD nll = sse / (2 * static_cast<LD>(in.sigma) * in.sigma) / B;

  LD kl = 0;
  const LD r = in.r;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      const std::size_t k = i * N + j;
      const LD q = 1 / (1 + std::exp(-(static_cast<LD>(psi[2 * k + 1]) - psi[2 * k])));
      kl += q * std::log(q / r) + (1 - q) * std::log((1 - q) / (1 - r));
    }
  LD l1 = 0;
  for (double w : w_msg) l1 += std::fabs(static_cast<LD>(w));
  for (double w : w_upd) l1 += std::fabs(static_cast<LD>(w));
  return nll + in.beta * kl + in.lambda * l1;
}

// Fourth-order central difference of `loss` along one parameter.
template <class F>
double richardson(F&& f, double h) {
  const LD d1 = f(h) - f(-h);
  const LD d2 = f(2 * h) - f(-2 * h);
  return static_cast<double>((8 * d1 - d2) / (12 * static_cast<LD>(h)));
}

struct GradCheck {
  std::size_t checked = 0;
  double worst_rel = 0.0;
  std::string worst_where;
};

// Compares the library's analytic gradient with the reference finite
// differences on every coordinate whose gradient exceeds `floor`.
inline GradCheck check_gradients(const Instance& in, double h = 1e-3, double floor = 1e-8) {
  using namespace cosine;
  ModelState st;
  st.logits.nodes = in.N;
  st.logits.psi = in.psi;
  st.library = in.library;
  st.coeffs.M = in.msg.size();
  st.coeffs.U = in.upd.size();
  st.coeffs.D = in.D;
  st.coeffs.w_msg = in.w_msg;
  st.coeffs.w_upd = in.w_upd;
  TrainConfig cfg;
  cfg.tau = in.tau;
  cfg.beta_kl = in.beta;
  cfg.lambda_w = in.lambda;
  cfg.sigma = in.sigma;
  cfg.prior_r = in.r;

  Batch batch;
  batch.size = in.B;
  batch.x = in.x;
  batch.target = in.target;
  auto fr = forward_sampled(st, batch, soft_adjacency_with_noise(st.logits, in.tau, in.noise));
  const auto grads = backward(fr.cache, nll_gradient(fr.pred, in.target, in.B, in.sigma), st, cfg);

  GradCheck out;
  auto compare = [&](double analytic, double fd, const std::string& where) {
    const double scale = std::max(std::fabs(analytic), std::fabs(fd));
    if (scale <= floor) return;
    ++out.checked;
    const double rel = std::fabs(analytic - fd) / scale;
    if (rel > out.worst_rel) {
      out.worst_rel = rel;
      out.worst_where = where + " analytic=" + format_double(analytic) + " fd=" + format_double(fd);
    }
  };
  for (std::size_t p = 0; p < in.psi.size(); ++p) {
    const double fd = richardson(
        [&](double dh) {
          auto psi = in.psi;
          psi[p] += dh;
          return loss(in, psi, in.w_msg, in.w_upd);
        },
        h);
    compare(grads.psi[p], fd, "psi[" + std::to_string(p) + "]");
  }
  for (std::size_t p = 0; p < in.w_msg.size(); ++p) {
    const double fd = richardson(
        [&](double dh) {
          auto w = in.w_msg;
          w[p] += dh;
          return loss(in, in.psi, w, in.w_upd);
        },
        h);
    compare(grads.w_msg[p], fd, "w_msg[" + std::to_string(p) + "]");
  }
  for (std::size_t p = 0; p < in.w_upd.size(); ++p) {
    const double fd = richardson(
        [&](double dh) {
          auto w = in.w_upd;
          w[p] += dh;
          return loss(in, in.psi, in.w_msg, w);
        },
        h);
    compare(grads.w_upd[p], fd, "w_upd[" + std::to_string(p) + "]");
  }
  return out;
}

}  // namespace refmodel
