#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ercmoe/erc_loss.hpp"
#include "ercmoe/random.hpp"

namespace ercmoe {

struct NoiseCheckReport {
  std::size_t uniform_samples = 0;
  std::size_t corner_trials = 0;
  std::size_t uniform_violations = 0;
  std::size_t corner_violations = 0;
  bool tight_within_exact = true;  // Cauchy-Schwarz eps <= exact eps for every row
  bool saw_duplicates = false;

  std::size_t violations() const { return uniform_violations + corner_violations; }
};

namespace detail {

// True when the proxy for row i is strictly closer to R_i than to every other
// distinct center. Centers identical to R_i are the same cluster and skipped.
inline bool stays_in_cluster(const Tensor& router, std::size_t i, std::span<const double> proxy) {
  const std::size_t n = router.rows(), d = router.cols();
  double own = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double diff = proxy[k] - router(i, k);
    own += diff * diff;
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i || row_distance(router, i, j) == 0.0) continue;
    double other = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = proxy[k] - router(j, k);
      other += diff * diff;
    }
    if (!(own < other)) return false;
  }
  return true;
}

inline Tensor random_router(std::size_t n, std::size_t d, bool duplicate_rows, Rng& rng) {
  Tensor r = normal_tensor({n, d}, 1.0, rng);
  if (duplicate_rows && n >= 2)
    for (std::size_t k = 0; k < d; ++k) r(1, k) = r(0, k);
  return r;
}

}  // namespace detail

/// Monte-Carlo and worst-case corner verification of the noise bound.
///
/// Uniform phase: one random router, `samples` independent draws of the full
/// noise matrix, every row checked against every other center.
/// Corner phase: `corner_trials` fresh routers; for each pair (i, j) the noise
/// takes 1 + eps where 2 R_ik (R_jk - R_ik) > 0 and 1 - eps elsewhere, which
/// maximizes the pull of the proxy toward R_j.
inline NoiseCheckReport noise_check(std::size_t n, std::size_t d, std::size_t samples, std::size_t corner_trials,
                                    std::uint64_t seed, bool duplicate_rows = false) {
  NoiseCheckReport rep;
  Rng rng = make_rng(seed, kNoiseStream);

  auto check_bounds = [&](const Tensor& r) {
    const NoiseBound tight = compute_eps(r, BoundKind::CauchySchwarz);
    const NoiseBound exact = compute_eps(r, BoundKind::Exact);
    for (std::size_t i = 0; i < n; ++i)
      if (tight.eps[i] > exact.eps[i]) rep.tight_within_exact = false;
    rep.saw_duplicates = rep.saw_duplicates || tight.has_duplicates;
    return tight;
  };

  const Tensor router = detail::random_router(n, d, duplicate_rows, rng);
  const NoiseBound bound = check_bounds(router);
  std::vector<double> proxy(d);
  for (std::size_t s = 0; s < samples; ++s) {
    const ProxyRows p = sample_proxy(router, bound, rng);
    bool ok = true;
    for (std::size_t i = 0; i < n; ++i) ok = ok && detail::stays_in_cluster(router, i, p.rows.row(i));
    if (!ok) ++rep.uniform_violations;
    ++rep.uniform_samples;
  }

  for (std::size_t t = 0; t < corner_trials; ++t) {
    const Tensor r = detail::random_router(n, d, duplicate_rows, rng);
    const NoiseBound b = check_bounds(r);
    bool ok = true;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const double a = 2.0 * r(i, k) * (r(j, k) - r(i, k));
          proxy[k] = r(i, k) * (a > 0.0 ? 1.0 + b.eps[i] : 1.0 - b.eps[i]);
        }
        ok = ok && detail::stays_in_cluster(r, i, proxy);
      }
    if (!ok) ++rep.corner_violations;
    ++rep.corner_trials;
  }
  return rep;
}

}  // namespace ercmoe
