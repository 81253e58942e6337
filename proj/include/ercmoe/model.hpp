#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ercmoe/aoe_layer.hpp"
#include "ercmoe/autodiff.hpp"
#include "ercmoe/erc_loss.hpp"
#include "ercmoe/moe_layer.hpp"
#include "ercmoe/random.hpp"
#include "ercmoe/synth_task.hpp"

namespace ercmoe {

enum class Variant : std::uint8_t { Moe = 0, Aoe = 1 };

inline const char* variant_name(Variant v) { return v == Variant::Moe ? "moe" : "aoe"; }

struct ModelShape {
  Variant variant = Variant::Moe;
  std::size_t layers = 1;
  std::size_t num_experts = 8;
  std::size_t top_k = 2;
  std::size_t model_dim = 32;
  std::size_t hidden_dim = 16;
  std::size_t rank = 0;  // AoE only

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Residual stack: h <- h + layer(h), prediction = final h.
struct Model {
  ModelShape shape;
  std::vector<MoeLayer> moe;
  std::vector<AoeLayer> aoe;

  static Model init(const ModelShape& shape, std::uint64_t seed) {
    Model m;
    m.shape = shape;
    Rng rng = make_rng(seed, kInitStream);
    for (std::size_t l = 0; l < shape.layers; ++l) {
      if (shape.variant == Variant::Moe) {
        m.moe.push_back(MoeLayer::init(shape.num_experts, shape.model_dim, shape.hidden_dim, rng));
      } else {
        m.aoe.push_back(AoeLayer::init(shape.num_experts, shape.model_dim, shape.hidden_dim, shape.rank, rng));
      }
    }
    return m;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> ps;
    for (MoeLayer& l : moe)
      for (Tensor* p : l.parameters()) ps.push_back(p);
    for (AoeLayer& l : aoe)
      for (Tensor* p : l.parameters()) ps.push_back(p);
    return ps;
  }

  std::size_t parameter_count() {
    std::size_t total = 0;
    for (Tensor* p : parameters()) total += p->size();
    return total;
  }
};

struct ObjectiveWeights {
  double lb_weight = 0.01;
  double erc_weight = 1.0;
  double ortho_weight = 0.0;
  double alpha = 1.0;
  Probe probe = Probe::GateProj;
  bool erc_enabled = true;
};

struct LayerTerms {
  Var lb;
  Var erc;    // invalid for AoE
  Var ortho;  // invalid unless ortho_weight > 0
  RoutingResult routing;
};

struct Objective {
  Var total;
  Var task;
  Var prediction;
  std::vector<LayerTerms> layers;
};

/// Proxy-noise factors for one step: per layer, delta from the current router,
/// or all ones when noise is disabled (the proxy is then the clean router).
struct NoisePlan {
  std::vector<Tensor> deltas;
  std::vector<NoiseBound> bounds;
};

inline NoisePlan sample_noise_plan(const Model& model, bool noise_enabled, Rng& rng) {
  NoisePlan plan;
  for (const MoeLayer& layer : model.moe) {
    NoiseBound b = compute_eps(layer.router);
    if (noise_enabled) {
      plan.deltas.push_back(sample_noise(b, layer.model_dim(), rng));
    } else {
      plan.deltas.push_back(Tensor(layer.router.shape(), 1.0));
    }
    plan.bounds.push_back(std::move(b));
  }
  return plan;
}

/// task + lb_weight * sum_l L_lb + erc_weight * sum_l L_ERC (+ ortho_weight * sum_l L_ortho).
/// The ERC term is always evaluated for MoE layers so it can be logged, but it
/// only enters the total when `erc_enabled`.
inline Objective build_objective(Tape& tape, Model& model, const Batch& batch, const ObjectiveWeights& w,
                                 const NoisePlan& noise) {
  Objective obj;
  Var h = tape.constant(batch.inputs);
  std::vector<Var> aux;
  const std::size_t k = model.shape.top_k;
  if (model.shape.variant == Variant::Moe) {
    for (std::size_t l = 0; l < model.moe.size(); ++l) {
      MoeLayerVars vars = bind(tape, model.moe[l]);
      MoeOutput out = moe_forward(vars, h, k);
      LayerTerms terms;
      terms.lb = load_balance_loss(out.weights, out.routing);
      aux.push_back(scale(terms.lb, w.lb_weight));
      Var m = compute_M(vars, proxy_rows(vars.router, noise.deltas.at(l)), w.probe);
      terms.erc = erc_loss(m, w.alpha);
      if (w.erc_enabled) aux.push_back(scale(terms.erc, w.erc_weight));
      if (w.ortho_weight > 0.0) {
        terms.ortho = ortho_loss(vars.router);
        aux.push_back(scale(terms.ortho, w.ortho_weight));
      }
      terms.routing = std::move(out.routing);
      obj.layers.push_back(std::move(terms));
      h = add(h, out.output);
    }
  } else {
    for (AoeLayer& layer : model.aoe) {
      AoeLayerVars vars = bind(tape, layer);
      MoeOutput out = aoe_forward(vars, h, k);
      LayerTerms terms;
      terms.lb = load_balance_loss(out.weights, out.routing);
      aux.push_back(scale(terms.lb, w.lb_weight));
      terms.routing = std::move(out.routing);
      obj.layers.push_back(std::move(terms));
      h = add(h, out.output);
    }
  }
  obj.prediction = h;
  obj.task = task_loss(h, tape.constant(batch.targets));
  obj.total = obj.task;
  for (Var a : aux) obj.total = add(obj.total, a);
  return obj;
}

}  // namespace ercmoe
