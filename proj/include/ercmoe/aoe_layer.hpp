#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "ercmoe/autodiff.hpp"
#include "ercmoe/moe_layer.hpp"
#include "ercmoe/random.hpp"

namespace ercmoe {

/// Rank that gives a factorized gate the parameter count of a dense one:
/// d r + r D = d D. Rounded down when d D / (d + D) is not an integer.
inline std::size_t parity_rank(std::size_t d, std::size_t hidden) { return d * hidden / (d + hidden); }

/// Parameters of one AoE expert minus those of a dense SwiGLU expert.
inline std::int64_t parity_delta(std::size_t d, std::size_t hidden, std::size_t rank) {
  const auto aoe = static_cast<std::int64_t>(d * rank + rank * hidden + 2 * d * hidden);
  return aoe - static_cast<std::int64_t>(3 * d * hidden);
}

/// Expert whose gate is factorized as Wg = W_down W_up.
struct AoeExpert {
  Tensor gate_down;  // [d x r]
  Tensor gate_up;    // [r x D]
  Tensor proj;       // Wp [d x D]
  Tensor out;        // Wo [D x d]
};

struct AoeLayer {
  std::vector<AoeExpert> experts;

  std::size_t num_experts() const { return experts.size(); }
  std::size_t model_dim() const { return experts.front().gate_down.rows(); }
  std::size_t rank() const { return experts.front().gate_down.cols(); }
  std::size_t hidden_dim() const { return experts.front().gate_up.cols(); }

  static AoeLayer init(std::size_t n, std::size_t d, std::size_t hidden, std::size_t rank, Rng& rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    AoeLayer layer;
    for (std::size_t i = 0; i < n; ++i) {
      AoeExpert e;
      e.gate_down = normal_tensor({d, rank}, sd, rng);
      e.gate_up = normal_tensor({rank, hidden}, sd, rng);
      e.proj = normal_tensor({d, hidden}, sd, rng);
      e.out = normal_tensor({hidden, d}, sd, rng);
      layer.experts.push_back(std::move(e));
    }
    return layer;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> ps;
    for (AoeExpert& e : experts) {
      ps.push_back(&e.gate_down);
      ps.push_back(&e.gate_up);
      ps.push_back(&e.proj);
      ps.push_back(&e.out);
    }
    return ps;
  }
};

struct AoeExpertVars {
  Var gate_down, gate_up, proj, out;
};

struct AoeLayerVars {
  std::vector<AoeExpertVars> experts;
};

inline AoeLayerVars bind(Tape& tape, AoeLayer& layer) {
  AoeLayerVars v;
  for (AoeExpert& e : layer.experts)
    v.experts.push_back({tape.param(e.gate_down), tape.param(e.gate_up), tape.param(e.proj), tape.param(e.out)});
  return v;
}

inline AoeLayerVars bind_constant(Tape& tape, const AoeLayer& layer) {
  AoeLayerVars v;
  for (const AoeExpert& e : layer.experts)
    v.experts.push_back(
        {tape.constant(e.gate_down), tape.constant(e.gate_up), tape.constant(e.proj), tape.constant(e.out)});
  return v;
}

/// Down-projections of every token by every expert, and the routing they imply.
struct AoeRouting {
  std::vector<Var> down;  // [T x r] per expert
  Var weights;            // softmax of the down-projection norms
  RoutingResult routing;
};

inline AoeRouting aoe_route(const AoeLayerVars& layer, Var x, std::size_t top_k) {
  AoeRouting r;
  std::vector<Var> norms;
  for (const AoeExpertVars& e : layer.experts) {
    r.down.push_back(matmul(x, e.gate_down));
    norms.push_back(l2_norm_rows(r.down.back()));
  }
  r.weights = softmax_rows(stack_columns(norms));
  r.routing = select_top_k(r.weights.value(), top_k);
  return r;
}

/// Selected experts resume from their down-projection; the rest stop there.
inline MoeOutput aoe_forward(const AoeLayerVars& layer, Var x, std::size_t top_k) {
  AoeRouting r = aoe_route(layer, x, top_k);
  const std::size_t n = layer.experts.size();
  Var y = combine_experts(x, r.weights, r.routing, n, [&](std::size_t e, const std::vector<std::size_t>& rows) {
    const AoeExpertVars& ev = layer.experts[e];
    Var gate = silu(matmul(gather_rows(r.down[e], rows), ev.gate_up));
    Var proj = matmul(gather_rows(x, rows), ev.proj);
    return matmul(hadamard(gate, proj), ev.out);
  });
  return {y, r.weights, std::move(r.routing)};
}

inline RoutingResult aoe_route(const AoeLayer& layer, const Tensor& x, std::size_t top_k) {
  Tape tape;
  return aoe_route(bind_constant(tape, layer), tape.constant(x), top_k).routing;
}

inline MoeResult aoe_forward(const AoeLayer& layer, const Tensor& x, std::size_t top_k) {
  Tape tape;
  MoeOutput out = aoe_forward(bind_constant(tape, layer), tape.constant(x), top_k);
  return {out.output.value(), std::move(out.routing)};
}

}  // namespace ercmoe
