#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ercmoe/autodiff.hpp"
#include "ercmoe/errors.hpp"
#include "ercmoe/random.hpp"
#include "ercmoe/tensor.hpp"

namespace ercmoe {

struct MoeConfig {
  std::size_t num_experts = 8;  // n
  std::size_t top_k = 2;        // K
  std::size_t model_dim = 32;   // d
  std::size_t hidden_dim = 16;  // D
  double alpha = 1.0;
  double lb_weight = 0.01;
  double erc_weight = 1.0;

  void validate() const {
    if (num_experts < 1) throw ConfigError("n", "must be at least 1");
    if (top_k < 1 || top_k > num_experts) throw ConfigError("K", "must satisfy 1 <= K <= n");
    if (model_dim < 2) throw ConfigError("d", "must be at least 2");
    if (hidden_dim < 1) throw ConfigError("D", "must be at least 1");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha", "must be finite and >= 0");
    if (!(lb_weight >= 0.0)) throw ConfigError("lb_weight", "must be >= 0");
    if (!(erc_weight >= 0.0)) throw ConfigError("erc_weight", "must be >= 0");
  }
};

/// SwiGLU expert: (SiLU(x Wg) * (x Wp)) Wo.
struct Expert {
  Tensor gate;  // Wg [d x D]
  Tensor proj;  // Wp [d x D]
  Tensor out;   // Wo [D x d]
};

struct MoeLayer {
  Tensor router;  // R [n x d]
  std::vector<Expert> experts;

  std::size_t num_experts() const { return router.rows(); }
  std::size_t model_dim() const { return router.cols(); }
  std::size_t hidden_dim() const { return experts.front().gate.cols(); }

  /// Entries ~ N(0, 1/d).
  static MoeLayer init(std::size_t n, std::size_t d, std::size_t hidden, Rng& rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    MoeLayer layer;
    layer.router = normal_tensor({n, d}, sd, rng);
    layer.experts.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Expert e;
      e.gate = normal_tensor({d, hidden}, sd, rng);
      e.proj = normal_tensor({d, hidden}, sd, rng);
      e.out = normal_tensor({hidden, d}, sd, rng);
      layer.experts.push_back(std::move(e));
    }
    return layer;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> ps{&router};
    for (Expert& e : experts) {
      ps.push_back(&e.gate);
      ps.push_back(&e.proj);
      ps.push_back(&e.out);
    }
    return ps;
  }
};

struct ExpertVars {
  Var gate, proj, out;
};

struct MoeLayerVars {
  Var router;
  std::vector<ExpertVars> experts;
};

inline MoeLayerVars bind(Tape& tape, MoeLayer& layer) {
  MoeLayerVars v;
  v.router = tape.param(layer.router);
  for (Expert& e : layer.experts) v.experts.push_back({tape.param(e.gate), tape.param(e.proj), tape.param(e.out)});
  return v;
}

/// Tensors bound as constants: forward-only evaluation.
inline MoeLayerVars bind_constant(Tape& tape, const MoeLayer& layer) {
  MoeLayerVars v;
  v.router = tape.constant(layer.router);
  for (const Expert& e : layer.experts)
    v.experts.push_back({tape.constant(e.gate), tape.constant(e.proj), tape.constant(e.out)});
  return v;
}

struct RoutingResult {
  Tensor weights;                            // [T x n] softmax probabilities
  std::vector<std::size_t> top_indices;      // [T x K] row-major
  Tensor top_weights;                        // [T x K]
  std::vector<std::size_t> dispatch_counts;  // [n]
  std::size_t top_k = 0;

  std::size_t tokens() const { return weights.rows(); }
  std::size_t expert_at(std::size_t t, std::size_t k) const { return top_indices[t * top_k + k]; }
};

/// Top-K selection over already-computed routing probabilities.
inline RoutingResult select_top_k(const Tensor& weights, std::size_t top_k) {
  const std::size_t tokens = weights.rows(), n = weights.cols();
  RoutingResult r;
  r.weights = weights;
  r.top_k = top_k;
  r.top_weights = Tensor({tokens, top_k});
  r.dispatch_counts.assign(n, 0);
  r.top_indices.reserve(tokens * top_k);
  for (std::size_t t = 0; t < tokens; ++t) {
    TopK sel = topk(weights.row(t), top_k);
    for (std::size_t k = 0; k < top_k; ++k) {
      r.top_indices.push_back(sel.indices[k]);
      r.top_weights(t, k) = sel.values[k];
      ++r.dispatch_counts[sel.indices[k]];
    }
  }
  return r;
}

/// Per-token expert probabilities softmax(X R^T); always the clean router.
inline Var router_probabilities(Var router, Var x) { return softmax_rows(matmul(x, transpose(router))); }

inline Var expert_forward(const ExpertVars& e, Var x) {
  return matmul(hadamard(silu(matmul(x, e.gate)), matmul(x, e.proj)), e.out);
}

/// Per-expert token lists in ascending token order, with the slot weights' coordinates.
struct Dispatch {
  std::vector<std::vector<std::size_t>> rows;
};

inline Dispatch make_dispatch(const RoutingResult& routing, std::size_t num_experts) {
  Dispatch d;
  d.rows.resize(num_experts);
  for (std::size_t t = 0; t < routing.tokens(); ++t)
    for (std::size_t k = 0; k < routing.top_k; ++k) d.rows[routing.expert_at(t, k)].push_back(t);
  return d;
}

/// Y[t] = sum over selected experts e of w[t, e] * expert_e(X[t]). Unselected
/// experts never see the token; weights are not renormalized over the top K.
template <class ExpertFn>
Var combine_experts(Var x, Var weights, const RoutingResult& routing, std::size_t num_experts, ExpertFn&& run_expert) {
  Tape& tape = x.tape();
  Var y = tape.constant(Tensor(x.shape()));
  const Dispatch dispatch = make_dispatch(routing, num_experts);
  for (std::size_t e = 0; e < num_experts; ++e) {
    const auto& rows = dispatch.rows[e];
    if (rows.empty()) continue;
    Var out = run_expert(e, rows);
    Var w = gather_elements(weights, rows, std::vector<std::size_t>(rows.size(), e));
    y = index_add_rows(y, rows, scale_rows(out, w));
  }
  return y;
}

struct MoeOutput {
  Var output;   // [T x d]
  Var weights;  // [T x n], differentiable routing probabilities
  RoutingResult routing;
};

inline MoeOutput moe_forward(const MoeLayerVars& layer, Var x, std::size_t top_k) {
  Var w = router_probabilities(layer.router, x);
  RoutingResult routing = select_top_k(w.value(), top_k);
  const std::size_t n = layer.experts.size();
  Var y = combine_experts(x, w, routing, n, [&](std::size_t e, const std::vector<std::size_t>& rows) {
    return expert_forward(layer.experts[e], gather_rows(x, rows));
  });
  return {y, w, std::move(routing)};
}

/// n * sum_i f_i * P_i, with f_i the share of the T*K dispatch slots that went
/// to expert i (constant) and P_i the mean routing probability (differentiable).
inline Var load_balance_loss(Var weights, const RoutingResult& routing) {
  const std::size_t n = weights.value().cols();
  const double slots = static_cast<double>(routing.tokens() * routing.top_k);
  Tensor f({n});
  for (std::size_t i = 0; i < n; ++i) f[i] = static_cast<double>(routing.dispatch_counts[i]) / slots;
  Var p = mean_rows(weights);
  return scale(sum(hadamard(weights.tape().constant(std::move(f)), p)), static_cast<double>(n));
}

inline double load_balance_loss(const RoutingResult& routing) {
  Tape tape;
  return load_balance_loss(tape.constant(routing.weights), routing).item();
}

// Value-level conveniences.

inline RoutingResult route(const MoeLayer& layer, const Tensor& x, std::size_t top_k) {
  Tape tape;
  Var w = router_probabilities(tape.constant(layer.router), tape.constant(x));
  return select_top_k(w.value(), top_k);
}

inline Tensor expert_forward(const Expert& e, const Tensor& x) {
  Tape tape;
  ExpertVars v{tape.constant(e.gate), tape.constant(e.proj), tape.constant(e.out)};
  return expert_forward(v, tape.constant(x)).value();
}

struct MoeResult {
  Tensor output;
  RoutingResult routing;
};

inline MoeResult moe_forward(const MoeLayer& layer, const Tensor& x, std::size_t top_k) {
  Tape tape;
  MoeOutput out = moe_forward(bind_constant(tape, layer), tape.constant(x), top_k);
  return {out.output.value(), std::move(out.routing)};
}

}  // namespace ercmoe
