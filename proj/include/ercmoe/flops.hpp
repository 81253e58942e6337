#pragma once

#include <cstdint>

#include "ercmoe/errors.hpp"

namespace ercmoe {

/// Closed-form training cost model. FLOPs count 2 per multiply-accumulate;
/// elementwise work (SiLU, products, norms) is ignored.
struct CostInputs {
  std::uint64_t tokens = 0;       // T
  std::uint64_t num_experts = 0;  // n
  std::uint64_t top_k = 0;        // K
  std::uint64_t model_dim = 0;    // d
  std::uint64_t hidden_dim = 0;   // D
  std::uint64_t rank = 0;         // r; 0 means derive d D / (d + D)
  std::uint64_t dp_size = 1;
  std::uint64_t ep_size = 1;

  std::uint64_t effective_rank() const {
    if (rank != 0) return rank;
    return model_dim * hidden_dim / (model_dim + hidden_dim);
  }

  void validate() const {
    if (tokens == 0) throw ConfigError("T", "must be positive");
    if (num_experts == 0) throw ConfigError("n", "must be positive");
    if (top_k == 0 || top_k > num_experts) throw ConfigError("K", "must satisfy 1 <= K <= n");
    if (model_dim == 0) throw ConfigError("d", "must be positive");
    if (hidden_dim == 0) throw ConfigError("D", "must be positive");
    if (dp_size == 0) throw ConfigError("dp", "must be positive");
    if (ep_size == 0 || num_experts % ep_size != 0) throw ConfigError("ep", "must be positive and divide n");
  }
};

/// 6 T K d D: three d x D projections per selected expert.
constexpr std::uint64_t moe_forward_flops(const CostInputs& c) {
  return 6 * c.tokens * c.top_k * c.model_dim * c.hidden_dim;
}

/// 2 n^2 D d: every proxy row through every expert's gate projection.
constexpr std::uint64_t erc_overhead_flops(const CostInputs& c) {
  return 2 * c.num_experts * c.num_experts * c.hidden_dim * c.model_dim;
}

/// 2 T (n - K) d r: down-projections computed by experts that are then dropped.
inline std::uint64_t aoe_overhead_flops(const CostInputs& c) {
  return 2 * c.tokens * (c.num_experts - c.top_k) * c.model_dim * c.effective_rank();
}

/// ERC cost relative to the base forward on one device. The ERC pass costs as
/// much as n^2 / 3 tokens; expert parallelism splits the experts, data
/// parallelism splits the tokens.
inline double erc_ratio_per_device(const CostInputs& c) {
  const double n = static_cast<double>(c.num_experts);
  const double erc = n * (n / static_cast<double>(c.ep_size)) / 3.0;
  const double base = static_cast<double>(c.top_k) * static_cast<double>(c.tokens) / static_cast<double>(c.dp_size);
  return erc / base;
}

struct FlopsReport {
  std::uint64_t moe_forward = 0;
  std::uint64_t erc_overhead = 0;
  std::uint64_t aoe_overhead = 0;
  double erc_ratio_per_device = 0.0;
};

inline FlopsReport flops_report(const CostInputs& c) {
  return {moe_forward_flops(c), erc_overhead_flops(c), aoe_overhead_flops(c), erc_ratio_per_device(c)};
}

}  // namespace ercmoe
