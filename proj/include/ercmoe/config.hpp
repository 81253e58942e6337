#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "ercmoe/aoe_layer.hpp"
#include "ercmoe/errors.hpp"
#include "ercmoe/model.hpp"
#include "ercmoe/synth_task.hpp"
#include "ercmoe/trainer.hpp"

namespace ercmoe {

/// Everything a run needs, read from one flat JSON object.
struct RunConfig {
  Variant variant = Variant::Moe;
  std::size_t layer_count = 2;
  MoeConfig moe;
  std::size_t rank = 0;  // AoE; 0 derives the parameter-parity rank
  TrainConfig train;
  ClusterTaskSpec task;
  std::string out_dir = "out";

  ModelShape model_shape() const {
    ModelShape s;
    s.variant = variant;
    s.layers = layer_count;
    s.num_experts = moe.num_experts;
    s.top_k = moe.top_k;
    s.model_dim = moe.model_dim;
    s.hidden_dim = moe.hidden_dim;
    s.rank = variant == Variant::Aoe ? (rank ? rank : parity_rank(moe.model_dim, moe.hidden_dim)) : 0;
    return s;
  }

  void validate() const {
    if (layer_count < 1) throw ConfigError("layer_count", "must be at least 1");
    moe.validate();
    if (moe.num_experts < 2 && variant == Variant::Moe) throw ConfigError("n", "need at least 2 experts");
    train.validate();
    task.validate();
    if (variant == Variant::Aoe) {
      if (train.objective.erc_enabled) throw ConfigError("erc_enabled", "must be false for the AoE variant");
      if (model_shape().rank == 0) throw ConfigError("r", "AoE rank must be positive");
    }
    if (out_dir.empty()) throw ConfigError("out_dir", "must not be empty");
  }
};

namespace detail {

template <class T>
T json_get(const nlohmann::json& j, const std::string& key) {
  const auto& v = j.at(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(key, "expected a boolean");
    return v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(key, "expected a string");
    return v.get<std::string>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(key, "expected a number");
    return v.get<T>();
  } else {
    if (!v.is_number_unsigned()) throw ConfigError(key, "expected a non-negative integer");
    return v.get<T>();
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  static const std::set<std::string> known{
      "variant",  "layer_count", "n",           "K",         "d",          "D",            "r",
      "alpha",    "lb_weight",   "erc_weight",  "ortho_weight", "erc_enabled", "noise_enabled", "probe",
      "steps",    "batch_tokens", "lr_max",     "lr_min",    "beta1",      "beta2",        "weight_decay",
      "seed",     "log_every",   "clusters",    "spread",    "out_dir"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError(key, "unknown key");

  RunConfig c;
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = detail::json_get<std::decay_t<decltype(field)>>(j, key);
  };
  if (j.contains("variant")) {
    const auto v = detail::json_get<std::string>(j, "variant");
    if (v == "moe") c.variant = Variant::Moe;
    else if (v == "aoe") c.variant = Variant::Aoe;
    else throw ConfigError("variant", "expected \"moe\" or \"aoe\"");
  }
  opt("layer_count", c.layer_count);
  opt("n", c.moe.num_experts);
  opt("K", c.moe.top_k);
  opt("d", c.moe.model_dim);
  opt("D", c.moe.hidden_dim);
  opt("r", c.rank);
  opt("alpha", c.moe.alpha);
  opt("lb_weight", c.moe.lb_weight);
  opt("erc_weight", c.moe.erc_weight);
  opt("ortho_weight", c.train.objective.ortho_weight);
  opt("erc_enabled", c.train.objective.erc_enabled);
  opt("noise_enabled", c.train.noise_enabled);
  if (j.contains("probe")) c.train.objective.probe = parse_probe(detail::json_get<std::string>(j, "probe"));
  opt("steps", c.train.steps);
  opt("batch_tokens", c.task.tokens);
  opt("lr_max", c.train.lr_max);
  opt("lr_min", c.train.lr_min);
  opt("beta1", c.train.beta1);
  opt("beta2", c.train.beta2);
  opt("weight_decay", c.train.weight_decay);
  opt("seed", c.train.seed);
  opt("log_every", c.train.log_every);
  opt("clusters", c.task.clusters);
  opt("spread", c.task.spread);
  opt("out_dir", c.out_dir);

  if (!(c.train.objective.ortho_weight >= 0.0)) throw ConfigError("ortho_weight", "must be >= 0");
  c.task.dim = c.moe.model_dim;
  c.task.seed = c.train.seed;
  c.train.objective.alpha = c.moe.alpha;
  c.train.objective.lb_weight = c.moe.lb_weight;
  c.train.objective.erc_weight = c.moe.erc_weight;
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'", 0);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
  }
  return parse_run_config(j);
}

/// Re-seed everything derived from the seed.
inline void override_seed(RunConfig& c, std::uint64_t seed) {
  c.train.seed = seed;
  c.task.seed = seed;
}

}  // namespace ercmoe
