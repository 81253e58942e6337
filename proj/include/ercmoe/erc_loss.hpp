#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ercmoe/autodiff.hpp"
#include "ercmoe/errors.hpp"
#include "ercmoe/moe_layer.hpp"
#include "ercmoe/random.hpp"
#include "ercmoe/tensor.hpp"

namespace ercmoe {

enum class BoundKind {
  CauchySchwarz,  // ||R_i - R_j|| / (2 ||R_i||), the deployed bound
  Exact,          // ||R_i - R_j||^2 / (2 sum_k |R_ik (R_jk - R_ik)|), minimized over j
};

/// Per-row multiplicative half-widths for the proxy noise.
struct NoiseBound {
  std::vector<double> eps;
  std::vector<std::size_t> nearest;
  bool has_duplicates = false;  // some eps_i collapsed to 0
  bool exceeds_one = false;     // some eps_i > 1: noise may flip signs
};

namespace detail {

inline double row_distance(const Tensor& r, std::size_t i, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < r.cols(); ++k) {
    const double diff = r(i, k) - r(j, k);
    s += diff * diff;
  }
  return std::sqrt(s);
}

inline void require_nonzero_rows(const Tensor& r, const char* op) {
  for (std::size_t i = 0; i < r.rows(); ++i) {
    if (l2_norm(r.row(i)) == 0.0) {
      throw DegenerateRouterError(std::string(op) + ": router row " + std::to_string(i) + " is the zero vector");
    }
  }
}

}  // namespace detail

/// Largest noise level that keeps each perturbed row inside its own cluster.
/// Computed on values only; the result never enters the gradient.
inline NoiseBound compute_eps(const Tensor& router, BoundKind kind = BoundKind::CauchySchwarz) {
  const std::size_t n = router.rows(), d = router.cols();
  if (router.rank() != 2 || n < 2) throw DimensionError("compute_eps: need an [n x d] router with n >= 2");
  detail::require_nonzero_rows(router, "compute_eps");

  NoiseBound b;
  b.eps.assign(n, 0.0);
  b.nearest.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = i == 0 ? 1 : 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dist = detail::row_distance(router, i, j);
      if (dist < best) {
        best = dist;
        arg = j;
      }
    }
    b.nearest[i] = arg;
    const double norm_i = l2_norm(router.row(i));
    if (kind == BoundKind::CauchySchwarz) {
      b.eps[i] = best / (2.0 * norm_i);
    } else {
      double tightest = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = router(j, k) - router(i, k);
          num += diff * diff;
          den += std::abs(router(i, k) * diff);
        }
        const double e = num == 0.0 ? 0.0 : (den == 0.0 ? std::numeric_limits<double>::infinity() : num / (2.0 * den));
        tightest = std::min(tightest, e);
      }
      b.eps[i] = tightest;
    }
    if (b.eps[i] == 0.0) b.has_duplicates = true;
    if (b.eps[i] > 1.0) b.exceeds_one = true;
  }
  return b;
}

/// Noise factors delta[i, k] ~ U(1 - eps_i, 1 + eps_i), sampled row by row.
inline Tensor sample_noise(const NoiseBound& bound, std::size_t dim, Rng& rng) {
  const std::size_t n = bound.eps.size();
  Tensor delta({n, dim});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double lo = 1.0 - bound.eps[i], hi = 1.0 + bound.eps[i];
    for (std::size_t k = 0; k < dim; ++k) delta(i, k) = lo + unit(rng) * (hi - lo);
  }
  return delta;
}

struct ProxyRows {
  Tensor rows;   // R~ = R * delta
  Tensor delta;
};

inline ProxyRows sample_proxy(const Tensor& router, const NoiseBound& bound, Rng& rng) {
  if (bound.eps.size() != router.rows()) throw DimensionError("sample_proxy: bound does not match router");
  ProxyRows p;
  p.delta = sample_noise(bound, router.cols(), rng);
  p.rows = router;
  for (std::size_t k = 0; k < p.rows.size(); ++k) p.rows[k] *= p.delta[k];
  return p;
}

/// Differentiable proxy rows: gradients reach R, delta is a constant.
inline Var proxy_rows(Var router, const Tensor& delta) { return hadamard(router, router.tape().constant(delta)); }

enum class Probe { GateProj, UpProj, SiluGate, PostSwiGLU, FinalOutput };

inline const char* probe_name(Probe p) {
  switch (p) {
    case Probe::GateProj: return "gate_proj";
    case Probe::UpProj: return "up_proj";
    case Probe::SiluGate: return "silu_gate";
    case Probe::PostSwiGLU: return "post_swiglu";
    case Probe::FinalOutput: return "final_output";
  }
  return "?";
}

inline Probe parse_probe(const std::string& s) {
  for (Probe p : {Probe::GateProj, Probe::UpProj, Probe::SiluGate, Probe::PostSwiGLU, Probe::FinalOutput})
    if (s == probe_name(p)) return p;
  throw ConfigError("probe", "unknown probe '" + s + "'");
}

inline Var probe_activation(const ExpertVars& e, Var x, Probe probe) {
  switch (probe) {
    case Probe::GateProj: return matmul(x, e.gate);
    case Probe::UpProj: return matmul(x, e.proj);
    case Probe::SiluGate: return silu(matmul(x, e.gate));
    case Probe::PostSwiGLU: return hadamard(silu(matmul(x, e.gate)), matmul(x, e.proj));
    case Probe::FinalOutput: return expert_forward(e, x);
  }
  throw std::invalid_argument("probe_activation: invalid probe");
}

/// M[i, j] = || probe_j(proxy[i]) ||, one batched pass of all n proxies through each expert.
inline Var compute_M(const MoeLayerVars& layer, Var proxy, Probe probe = Probe::GateProj) {
  std::vector<Var> columns;
  columns.reserve(layer.experts.size());
  for (const ExpertVars& e : layer.experts) columns.push_back(l2_norm_rows(probe_activation(e, proxy, probe)));
  return stack_columns(columns);
}

/// Hinge coupling loss:
///   (1/n^2) sum_i sum_{j != i} [ max(M[i,j] - a M[i,i], 0) + max(M[j,i] - a M[i,i], 0) ]
inline Var erc_loss(Var m, double alpha) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("erc_loss: alpha must be >= 0");
  const std::size_t n = m.value().rows();
  Tape& tape = m.tape();
  Var scaled_diag = scale(diag(m), alpha);
  Var row_terms = relu_clip(sub_column_vector(m, scaled_diag));  // M[i,j] - a M[i,i]
  Var col_terms = relu_clip(sub_row_vector(m, scaled_diag));     // M[i,j] - a M[j,j]
  Tensor mask({n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) mask(i, i) = 0.0;
  return mean(hadamard(add(row_terms, col_terms), tape.constant(std::move(mask))));
}

inline double erc_loss(const Tensor& m, double alpha) {
  Tape tape;
  return erc_loss(tape.constant(m), alpha).item();
}

inline Tensor compute_M(const MoeLayer& layer, const Tensor& proxy, Probe probe = Probe::GateProj) {
  Tape tape;
  return compute_M(bind_constant(tape, layer), tape.constant(proxy), probe).value();
}

/// Deterministic post-hoc loss per alpha with the noise disabled (proxy = R).
inline std::vector<double> erc_eval_clean(const MoeLayer& layer, std::span<const double> alphas,
                                          Probe probe = Probe::GateProj) {
  const Tensor m = compute_M(layer, layer.router, probe);
  std::vector<double> out;
  out.reserve(alphas.size());
  for (double a : alphas) out.push_back(erc_loss(m, a));
  return out;
}

/// ||R^ R^T - I||_F^2 / n^2 with R^ the row-normalized router.
inline Var ortho_loss(Var router) {
  detail::require_nonzero_rows(router.value(), "ortho_loss");
  const std::size_t n = router.value().rows();
  Var unit = scale_rows(router, reciprocal(l2_norm_rows(router)));
  Var gram = matmul(unit, transpose(unit));
  Var dev = sub(gram, router.tape().constant(Tensor::identity(n)));
  return scale(sum(hadamard(dev, dev)), 1.0 / static_cast<double>(n * n));
}

inline double ortho_loss(const Tensor& router) {
  Tape tape;
  return ortho_loss(tape.constant(router)).item();
}

/// Mean |cos(R_i, R_j)| over ordered pairs i != j.
inline double router_cosine_stat(const Tensor& router) {
  const std::size_t n = router.rows();
  if (n < 2) throw DimensionError("router_cosine_stat: need n >= 2");
  detail::require_nonzero_rows(router, "router_cosine_stat");
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = l2_norm(router.row(i));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < router.cols(); ++k) dot += router(i, k) * router(j, k);
      total += std::abs(dot) / (norms[i] * norms[j]);
    }
  return total / static_cast<double>(n * (n - 1));
}

/// Norm diagnostic: can the loss be gamed by rescaling parameters?
struct NormDecomposition {
  std::vector<double> router_norms;  // ||R[i]||
  std::vector<double> gate_norms;    // ||Wg^i||_F
  Tensor activation;                 // clean M
  Tensor alignment;                  // M[i,j] / (||R[i]|| ||Wg^j||_F), in [0, 1]
};

inline NormDecomposition norm_decomposition(const MoeLayer& layer) {
  const std::size_t n = layer.num_experts();
  NormDecomposition nd;
  nd.activation = compute_M(layer, layer.router, Probe::GateProj);
  nd.alignment = Tensor({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    nd.router_norms.push_back(l2_norm(layer.router.row(i)));
    nd.gate_norms.push_back(frobenius_norm(layer.experts[i].gate));
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double denom = nd.router_norms[i] * nd.gate_norms[j];
      nd.alignment(i, j) = denom == 0.0 ? 0.0 : nd.activation(i, j) / denom;
    }
  return nd;
}

}  // namespace ercmoe
