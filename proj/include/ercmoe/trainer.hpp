#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "ercmoe/erc_loss.hpp"
#include "ercmoe/errors.hpp"
#include "ercmoe/model.hpp"
#include "ercmoe/synth_task.hpp"

namespace ercmoe {

struct TrainConfig {
  std::size_t steps = 500;
  double lr_max = 1e-2;
  double lr_min = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t log_every = 10;
  ObjectiveWeights objective;
  bool noise_enabled = true;

  void validate() const {
    if (steps < 1) throw ConfigError("steps", "must be at least 1");
    if (!(lr_max > 0.0)) throw ConfigError("lr_max", "must be positive");
    if (!(lr_min >= 0.0) || lr_min > lr_max) throw ConfigError("lr_min", "must satisfy 0 <= lr_min <= lr_max");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be >= 0");
    if (log_every < 1) throw ConfigError("log_every", "must be at least 1");
  }
};

/// lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2
inline double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min) {
  if (total == 0) return lr_max;
  const double progress = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;

  explicit AdamState(const std::vector<Tensor*>& params) {
    for (const Tensor* p : params) {
      m.emplace_back(p->size(), 0.0);
      v.emplace_back(p->size(), 0.0);
    }
  }
};

/// One AdamW update with bias correction and decoupled decay theta *= (1 - lr wd).
inline void adamw_step(const std::vector<Tensor*>& params, AdamState& state, double lr, double beta1, double beta2,
                       double weight_decay, double eps = 1e-8) {
  if (state.m.size() != params.size()) throw DimensionError("adamw_step: state does not match parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    if (state.m[pi].size() != p.size()) throw DimensionError("adamw_step: state does not match parameters");
    if (!p.has_grad()) p.zero_grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = p.grad[k];
      if (!std::isfinite(g)) {
        throw NumericError("adamw_step: non-finite gradient at optimizer step " + std::to_string(state.step));
      }
      m[k] = beta1 * m[k] + (1.0 - beta1) * g;
      v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      p[k] = p[k] * (1.0 - lr * weight_decay) - lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

struct MetricsRow {
  std::size_t step = 0;
  std::size_t layer = 0;
  double task_loss = 0.0;
  double lb_loss = 0.0;
  double erc_loss = 0.0;
  double eps_mean = 0.0;
  double eps_min = 0.0;
  double router_norm_mean = 0.0;
  double router_norm_std = 0.0;
  double router_cos_mean = 0.0;
  double routing_entropy = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,layer,task_loss,lb_loss,erc_loss,eps_mean,eps_min,router_norm_mean,router_norm_std,router_cos_mean,"
    "routing_entropy";

/// Mean over clusters of the entropy (nats) of that cluster's top-K slot distribution.
inline double cluster_routing_entropy(const RoutingResult& routing, const std::vector<std::size_t>& cluster_ids,
                                      std::size_t num_experts) {
  const std::size_t clusters = cluster_ids.empty() ? 0 : *std::max_element(cluster_ids.begin(), cluster_ids.end()) + 1;
  std::vector<std::vector<double>> counts(clusters, std::vector<double>(num_experts, 0.0));
  for (std::size_t t = 0; t < routing.tokens(); ++t)
    for (std::size_t k = 0; k < routing.top_k; ++k) counts[cluster_ids[t]][routing.expert_at(t, k)] += 1.0;
  double total = 0.0;
  std::size_t present = 0;
  for (const auto& c : counts) {
    double mass = 0.0;
    for (double v : c) mass += v;
    if (mass == 0.0) continue;
    double h = 0.0;
    for (double v : c)
      if (v > 0.0) h -= (v / mass) * std::log(v / mass);
    total += h;
    ++present;
  }
  return present ? total / static_cast<double>(present) : 0.0;
}

struct RouterStats {
  double norm_mean = 0.0, norm_std = 0.0, cos_mean = 0.0;
};

inline RouterStats router_stats(const Tensor& router) {
  RouterStats s;
  const std::size_t n = router.rows();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = l2_norm(router.row(i));
  for (double v : norms) s.norm_mean += v;
  s.norm_mean /= static_cast<double>(n);
  for (double v : norms) s.norm_std += (v - s.norm_mean) * (v - s.norm_mean);
  s.norm_std = std::sqrt(s.norm_std / static_cast<double>(n));
  s.cos_mean = n >= 2 ? router_cosine_stat(router) : 0.0;
  return s;
}

struct TrainResult {
  Model model;
  std::vector<MetricsRow> metrics;
};

using MetricsSink = std::function<void(const MetricsRow&)>;

/// Deterministic in (model, task, cfg): batches come from the task seed and the
/// step index, proxy noise from cfg.seed and the step index.
inline TrainResult train(Model model, const ClusterTask& task, const TrainConfig& cfg,
                         const MetricsSink& sink = nullptr) {
  cfg.validate();
  if (model.shape.variant == Variant::Aoe && cfg.objective.erc_enabled) {
    throw ConfigError("erc_enabled", "the coupling loss needs a router; AoE has none");
  }
  if (task.spec().dim != model.shape.model_dim) throw ConfigError("d", "task and model widths differ");

  TrainResult result;
  const std::vector<Tensor*> params = model.parameters();
  AdamState adam(params);
  const std::size_t n = model.shape.num_experts;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Batch batch = task.batch(step);
    Rng noise_rng = make_rng(cfg.seed, kNoiseStream, step);
    const NoisePlan noise = sample_noise_plan(model, cfg.noise_enabled, noise_rng);

    for (Tensor* p : params) p->zero_grad();
    Tape tape;
    Objective obj;
    try {
      obj = build_objective(tape, model, batch, cfg.objective, noise);
      tape.backward(obj.total);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }

    const bool log = step % cfg.log_every == 0 || step + 1 == cfg.steps;
    if (log) {
      for (std::size_t l = 0; l < obj.layers.size(); ++l) {
        const LayerTerms& lt = obj.layers[l];
        MetricsRow row;
        row.step = step;
        row.layer = l;
        row.task_loss = obj.task.item();
        row.lb_loss = lt.lb.item();
        row.routing_entropy = cluster_routing_entropy(lt.routing, batch.cluster_ids, n);
        if (model.shape.variant == Variant::Moe) {
          row.erc_loss = lt.erc.item();
          const NoiseBound& b = noise.bounds[l];
          double total = 0.0;
          for (double e : b.eps) total += e;
          row.eps_mean = total / static_cast<double>(b.eps.size());
          row.eps_min = *std::min_element(b.eps.begin(), b.eps.end());
          const RouterStats rs = router_stats(model.moe[l].router);
          row.router_norm_mean = rs.norm_mean;
          row.router_norm_std = rs.norm_std;
          row.router_cos_mean = rs.cos_mean;
        }
        result.metrics.push_back(row);
        if (sink) sink(row);
      }
    }

    const double lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
    try {
      adamw_step(params, adam, lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
  }
  result.model = std::move(model);
  return result;
}

}  // namespace ercmoe
