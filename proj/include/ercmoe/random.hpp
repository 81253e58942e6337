#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "ercmoe/tensor.hpp"

namespace ercmoe {

using Rng = std::mt19937_64;

/// Independent, reproducible stream for (seed, purpose, index).
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

// Stream identifiers.
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kTaskStream = 2;
inline constexpr std::uint64_t kBatchStream = 3;
inline constexpr std::uint64_t kNoiseStream = 4;

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace ercmoe
