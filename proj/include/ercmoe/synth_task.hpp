#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "ercmoe/autodiff.hpp"
#include "ercmoe/errors.hpp"
#include "ercmoe/random.hpp"
#include "ercmoe/tensor.hpp"

namespace ercmoe {

/// Clustered regression: tokens scatter around unit-norm centers and each
/// cluster has its own linear target map.
struct ClusterTaskSpec {
  std::size_t clusters = 8;
  std::size_t dim = 32;
  double spread = 0.1;
  std::uint64_t seed = 0;
  std::size_t tokens = 256;

  void validate() const {
    if (clusters < 2) throw ConfigError("clusters", "must be at least 2");
    if (dim < 2) throw ConfigError("d", "must be at least 2");
    if (!(spread > 0.0) || !std::isfinite(spread)) throw ConfigError("spread", "must be positive");
    if (tokens < 1) throw ConfigError("batch_tokens", "must be at least 1");
  }
};

struct Batch {
  Tensor inputs;   // [T x d]
  Tensor targets;  // [T x d]
  std::vector<std::size_t> cluster_ids;
};

class ClusterTask {
 public:
  explicit ClusterTask(ClusterTaskSpec spec) : spec_(spec) {
    Rng rng = make_rng(spec_.seed, kTaskStream);
    const std::size_t d = spec_.dim;
    for (std::size_t c = 0; c < spec_.clusters; ++c) {
      Tensor center = normal_tensor({d}, 1.0, rng);
      const double norm = l2_norm(center.data());
      for (double& v : center.values()) v /= norm;
      centers_.push_back(std::move(center));
      maps_.push_back(normal_tensor({d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    }
  }

  const ClusterTaskSpec& spec() const { return spec_; }
  const Tensor& center(std::size_t c) const { return centers_[c]; }
  const Tensor& map(std::size_t c) const { return maps_[c]; }

  /// Deterministic in (seed, index).
  Batch batch(std::uint64_t index) const {
    const std::size_t t_count = spec_.tokens, d = spec_.dim;
    Rng rng = make_rng(spec_.seed, kBatchStream, index);
    std::uniform_int_distribution<std::size_t> pick(0, spec_.clusters - 1);
    std::normal_distribution<double> noise(0.0, spec_.spread);
    Batch b{Tensor({t_count, d}), Tensor({t_count, d}), std::vector<std::size_t>(t_count)};
    for (std::size_t t = 0; t < t_count; ++t) {
      const std::size_t c = pick(rng);
      b.cluster_ids[t] = c;
      for (std::size_t k = 0; k < d; ++k) b.inputs(t, k) = centers_[c][k] + noise(rng);
      // target = A_c x  (A_c acting on column vectors)
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += maps_[c](i, k) * b.inputs(t, k);
        b.targets(t, i) = acc;
      }
    }
    return b;
  }

 private:
  ClusterTaskSpec spec_;
  std::vector<Tensor> centers_;
  std::vector<Tensor> maps_;
};

inline Batch generate(const ClusterTaskSpec& spec, std::uint64_t index = 0) { return ClusterTask(spec).batch(index); }

/// Mean squared error over all entries.
inline Var task_loss(Var pred, Var target) {
  Var diff = sub(pred, target);
  return mean(hadamard(diff, diff));
}

}  // namespace ercmoe
