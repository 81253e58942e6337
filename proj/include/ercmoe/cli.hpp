#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ercmoe/checkpoint.hpp"
#include "ercmoe/config.hpp"
#include "ercmoe/erc_loss.hpp"
#include "ercmoe/flops.hpp"
#include "ercmoe/grad_check.hpp"
#include "ercmoe/model.hpp"
#include "ercmoe/noise_check.hpp"
#include "ercmoe/trainer.hpp"

namespace ercmoe::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

inline constexpr std::size_t kGradcheckMaxParams = 10000;
inline constexpr double kGradcheckTolerance = 1e-4;

/// 17 significant digits: doubles survive a text round trip exactly.
inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_csv_row(const MetricsRow& r) {
  std::string s = std::to_string(r.step) + ',' + std::to_string(r.layer);
  for (double v : {r.task_loss, r.lb_loss, r.erc_loss, r.eps_mean, r.eps_min, r.router_norm_mean, r.router_norm_std,
                   r.router_cos_mean, r.routing_entropy})
    s += ',' + fmt_real(v);
  return s;
}

inline std::vector<double> parse_alpha_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (item.empty() || end != item.c_str() + item.size() || !(v >= 0.0)) {
      throw ConfigError("alphas", "bad value '" + item + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("alphas", "empty list");
  return out;
}

/// Open `dir/name` for writing, creating `dir`; stdout when dir is empty.
class OutputFile {
 public:
  OutputFile(const std::string& dir, const std::string& name, std::ostream& fallback) : stream_(&fallback) {
    if (dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    path_ = (std::filesystem::path(dir) / name).string();
    file_.open(path_, std::ios::trunc);
    if (!file_) throw IoError("cannot write '" + path_ + "'", 0);
    stream_ = &file_;
  }
  std::ostream& stream() { return *stream_; }
  const std::string& path() const { return path_; }

 private:
  std::ofstream file_;
  std::ostream* stream_;
  std::string path_;
};

inline void prepare_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const auto probe = std::filesystem::path(dir) / ".write_test";
  std::ofstream f(probe);
  if (!f) throw ConfigError("out_dir", "directory '" + dir + "' is not writable");
  f.close();
  std::filesystem::remove(probe, ec);
}

inline std::size_t log_every_from_env(std::size_t fallback) {
  if (const char* env = std::getenv("ERCMOE_LOG_EVERY")) {
    char* end = nullptr;
    const long long v = std::strtoll(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("ERCMOE_LOG_EVERY", "must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return fallback;
}

// ---------------------------------------------------------------------------

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

inline RunConfig resolve_config(const CommonOptions& o) {
  RunConfig c = load_run_config(o.config);
  if (o.seed) override_seed(c, *o.seed);
  if (!o.out.empty()) c.out_dir = o.out;
  c.train.log_every = log_every_from_env(c.train.log_every);
  return c;
}

inline int cmd_train(const CommonOptions& o, std::ostream& out) {
  RunConfig c = resolve_config(o);
  prepare_out_dir(c.out_dir);
  const auto dir = std::filesystem::path(c.out_dir);
  std::ofstream metrics(dir / "metrics.csv", std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics.csv", 0);
  metrics << kMetricsHeader << '\n';

  const ClusterTask task(c.task);
  TrainResult r = train(Model::init(c.model_shape(), c.train.seed), task, c.train,
                        [&](const MetricsRow& row) { metrics << metrics_csv_row(row) << '\n'; });
  metrics.flush();
  save_checkpoint((dir / "checkpoint.bin").string(), r.model);

  const MetricsRow& last = r.metrics.back();
  out << "trained " << c.train.steps << " steps, " << c.layer_count << " layer(s); final task_loss "
      << fmt_real(last.task_loss) << "\n"
      << "metrics: " << (dir / "metrics.csv").string() << "\ncheckpoint: " << (dir / "checkpoint.bin").string()
      << "\n";
  return kOk;
}

/// Full objective with proxy noise sampled once and then held fixed, so the
/// finite differences see the same function the tape differentiates.
inline GradCheckReport gradcheck_model(Model& model, const RunConfig& c, bool inject_fault) {
  const Batch batch = ClusterTask(c.task).batch(0);
  Rng rng = make_rng(c.train.seed, kNoiseStream, 0);
  const NoisePlan noise = sample_noise_plan(model, c.train.noise_enabled, rng);
  return grad_check(
      [&](Tape& t) { return build_objective(t, model, batch, c.train.objective, noise).total; }, model.parameters(),
      1e-5, inject_fault);
}

inline int cmd_gradcheck(const CommonOptions& o, bool inject_fault, std::ostream& out) {
  RunConfig c = resolve_config(o);
  Model model = Model::init(c.model_shape(), c.train.seed);
  const std::size_t count = model.parameter_count();
  if (count > kGradcheckMaxParams) {
    throw ConfigError("n", "gradcheck needs at most " + std::to_string(kGradcheckMaxParams) + " parameters, config has " +
                               std::to_string(count));
  }
  const GradCheckReport rep = gradcheck_model(model, c, inject_fault);
  const bool ok = rep.passed(kGradcheckTolerance);
  out << "parameters checked: " << rep.checked << "\n"
      << "max relative error: " << fmt_real(rep.max_rel_error) << " (tensor " << rep.worst_param << ", index "
      << rep.worst_index << ", analytic " << fmt_real(rep.analytic_at_worst) << ", numeric "
      << fmt_real(rep.numeric_at_worst) << ")\n"
      << (ok ? "PASS" : "FAIL") << " (tolerance " << kGradcheckTolerance << ")\n";
  return ok ? kOk : kCheckFailed;
}

struct NoiseCheckOptions {
  std::size_t n = 8, d = 16, samples = 100000, corner_trials = 1000;
  std::uint64_t seed = 1;
  bool duplicate_rows = false;
};

inline int cmd_noisecheck(const NoiseCheckOptions& o, std::ostream& out) {
  if (o.samples < 1) throw ConfigError("samples", "must be at least 1");
  if (o.n < 2) throw ConfigError("n", "must be at least 2");
  if (o.d < 1) throw ConfigError("d", "must be positive");
  const NoiseCheckReport rep = noise_check(o.n, o.d, o.samples, o.corner_trials, o.seed, o.duplicate_rows);
  out << "uniform samples: " << rep.uniform_samples << ", violations: " << rep.uniform_violations << "\n"
      << "corner trials: " << rep.corner_trials << ", violations: " << rep.corner_violations << "\n"
      << "cauchy-schwarz eps <= exact eps: " << (rep.tight_within_exact ? "yes" : "NO") << "\n"
      << "duplicate rows seen: " << (rep.saw_duplicates ? "yes" : "no") << "\n"
      << "total violations: " << rep.violations() << "\n";
  return rep.violations() == 0 && rep.tight_within_exact ? kOk : kCheckFailed;
}

struct FlopsOptions {
  std::string preset;
  std::optional<std::uint64_t> tokens, n, k, d, hidden, rank, dp, ep;
};

inline CostInputs resolve_cost_inputs(const FlopsOptions& o) {
  CostInputs c;
  if (o.preset == "15b") {
    c = {3000000, 256, 8, 1536, 768, 512, 64, 8};
  } else if (o.preset == "3b") {
    c = {3000000, 64, 8, 1536, 768, 512, 32, 1};
  } else if (!o.preset.empty()) {
    throw ConfigError("preset", "expected 3b or 15b");
  }
  if (o.tokens) c.tokens = *o.tokens;
  if (o.n) c.num_experts = *o.n;
  if (o.k) c.top_k = *o.k;
  if (o.d) c.model_dim = *o.d;
  if (o.hidden) c.hidden_dim = *o.hidden;
  if (o.rank) c.rank = *o.rank;
  if (o.dp) c.dp_size = *o.dp;
  if (o.ep) c.ep_size = *o.ep;
  c.validate();
  return c;
}

inline nlohmann::ordered_json flops_json(const CostInputs& c) {
  const FlopsReport r = flops_report(c);
  nlohmann::ordered_json j;
  j["inputs"] = {{"T", c.tokens},         {"n", c.num_experts}, {"K", c.top_k},      {"d", c.model_dim},
                 {"D", c.hidden_dim},     {"r", c.effective_rank()}, {"dp_size", c.dp_size}, {"ep_size", c.ep_size}};
  j["moe_forward_flops"] = r.moe_forward;
  j["erc_overhead_flops"] = r.erc_overhead;
  j["aoe_overhead_flops"] = r.aoe_overhead;
  j["erc_ratio_per_device"] = r.erc_ratio_per_device;
  j["erc_ratio_percent"] = 100.0 * r.erc_ratio_per_device;
  return j;
}

inline int cmd_flops(const FlopsOptions& o, std::ostream& out) {
  out << flops_json(resolve_cost_inputs(o)).dump(2) << "\n";
  return kOk;
}

inline int cmd_erc_eval(const std::string& checkpoint, const std::string& alphas_text, const std::string& probe,
                        const std::string& out_dir, std::ostream& out) {
  const std::vector<double> alphas = parse_alpha_list(alphas_text);
  const Probe p = parse_probe(probe);
  const Model m = load_checkpoint(checkpoint);
  if (m.shape.variant != Variant::Moe) throw ConfigError("checkpoint", "coupling loss is undefined for AoE models");
  OutputFile file(out_dir, "erc_eval.csv", out);
  std::ostream& os = file.stream();
  os << "layer,alpha,erc_loss\n";
  for (std::size_t l = 0; l < m.moe.size(); ++l) {
    const auto losses = erc_eval_clean(m.moe[l], alphas, p);
    for (std::size_t a = 0; a < alphas.size(); ++a) os << l << ',' << fmt_real(alphas[a]) << ',' << fmt_real(losses[a]) << '\n';
  }
  if (!file.path().empty()) out << "wrote " << file.path() << "\n";
  return kOk;
}

/// One CSV row per router row and per gate column (as a width-d row).
inline void write_weights_csv(const Model& m, std::ostream& os) {
  const std::size_t d = m.shape.model_dim;
  os << "layer,expert,matrix,row";
  for (std::size_t k = 0; k < d; ++k) os << ",x" << k;
  os << '\n';
  auto emit = [&](std::size_t l, std::size_t e, const char* matrix, std::size_t row, auto value_at) {
    os << l << ',' << e << ',' << matrix << ',' << row;
    for (std::size_t k = 0; k < d; ++k) os << ',' << fmt_real(value_at(k));
    os << '\n';
  };
  for (std::size_t l = 0; l < m.moe.size(); ++l) {
    const MoeLayer& layer = m.moe[l];
    for (std::size_t e = 0; e < layer.num_experts(); ++e) {
      emit(l, e, "router", 0, [&](std::size_t k) { return layer.router(e, k); });
      const Tensor& g = layer.experts[e].gate;
      for (std::size_t c = 0; c < g.cols(); ++c) emit(l, e, "gate", c, [&](std::size_t k) { return g(k, c); });
    }
  }
  for (std::size_t l = 0; l < m.aoe.size(); ++l) {
    const AoeLayer& layer = m.aoe[l];
    for (std::size_t e = 0; e < layer.num_experts(); ++e) {
      const Tensor& g = layer.experts[e].gate_down;
      for (std::size_t c = 0; c < g.cols(); ++c) emit(l, e, "gate_down", c, [&](std::size_t k) { return g(k, c); });
    }
  }
}

inline int cmd_export_weights(const std::string& checkpoint, const std::string& out_dir, std::ostream& out) {
  const Model m = load_checkpoint(checkpoint);
  OutputFile file(out_dir, "weights.csv", out);
  write_weights_csv(m, file.stream());
  if (!file.path().empty()) out << "wrote " << file.path() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

/// Parses `args` (without the program name) and runs one subcommand.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sparse mixture-of-experts with expert-router coupling loss", "ercmoe"};
  app.require_subcommand(1);

  CommonOptions train_opts, grad_opts;
  auto* train_cmd = app.add_subcommand("train", "Train a model on the synthetic cluster task");
  train_cmd->add_option("--config", train_opts.config, "JSON run configuration")->required();
  train_cmd->add_option("--seed", train_opts.seed, "Override the config seed");
  train_cmd->add_option("--out", train_opts.out, "Output directory (overrides out_dir)");

  bool inject_fault = false;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full training objective");
  grad_cmd->add_option("--config", grad_opts.config, "JSON run configuration")->required();
  grad_cmd->add_option("--seed", grad_opts.seed, "Override the config seed");
  grad_cmd->add_option("--out", grad_opts.out, "Unused; accepted for uniformity");
  grad_cmd->add_flag("--inject-backward-fault", inject_fault, "Corrupt the SiLU backward (negative control)")
      ->group("");

  NoiseCheckOptions noise_opts;
  auto* noise_cmd = app.add_subcommand("noisecheck", "Verify that proxy noise never crosses a cluster boundary");
  noise_cmd->add_option("--n", noise_opts.n, "Router rows");
  noise_cmd->add_option("--d", noise_opts.d, "Row width");
  noise_cmd->add_option("--samples", noise_opts.samples, "Uniform noise draws");
  noise_cmd->add_option("--corner-trials", noise_opts.corner_trials, "Worst-case corner trials");
  noise_cmd->add_option("--seed", noise_opts.seed, "RNG seed");
  noise_cmd->add_flag("--duplicate-rows", noise_opts.duplicate_rows, "Make router row 1 a copy of row 0");

  FlopsOptions flops_opts;
  auto* flops_cmd = app.add_subcommand("flops", "Closed-form FLOPs and ERC overhead report (JSON)");
  flops_cmd->add_option("--preset", flops_opts.preset, "3b or 15b");
  flops_cmd->add_option("--T", flops_opts.tokens, "Tokens per batch");
  flops_cmd->add_option("--n", flops_opts.n, "Experts");
  flops_cmd->add_option("--K", flops_opts.k, "Experts per token");
  flops_cmd->add_option("--d", flops_opts.d, "Model width");
  flops_cmd->add_option("--D", flops_opts.hidden, "Expert hidden width");
  flops_cmd->add_option("--r", flops_opts.rank, "AoE rank (default d*D/(d+D))");
  flops_cmd->add_option("--dp", flops_opts.dp, "Data-parallel degree");
  flops_cmd->add_option("--ep", flops_opts.ep, "Expert-parallel degree");

  std::string eval_ckpt, eval_alphas = "0,0.5,1,2,3,4,5,8,16,32", eval_probe = "gate_proj", eval_out;
  auto* eval_cmd = app.add_subcommand("erc-eval", "Noise-free coupling loss of a checkpoint across alphas");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--alphas", eval_alphas, "Comma-separated alpha values");
  eval_cmd->add_option("--probe", eval_probe, "Activation used for M");
  eval_cmd->add_option("--out", eval_out, "Output directory (default stdout)");

  std::string export_ckpt, export_out;
  auto* export_cmd = app.add_subcommand("export-weights", "Dump router rows and gate columns as CSV");
  export_cmd->add_option("--checkpoint", export_ckpt, "Checkpoint file")->required();
  export_cmd->add_option("--out", export_out, "Output directory (default stdout)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train_cmd) return cmd_train(train_opts, out);
    if (*grad_cmd) return cmd_gradcheck(grad_opts, inject_fault, out);
    if (*noise_cmd) return cmd_noisecheck(noise_opts, out);
    if (*flops_cmd) return cmd_flops(flops_opts, out);
    if (*eval_cmd) return cmd_erc_eval(eval_ckpt, eval_alphas, eval_probe, eval_out, out);
    if (*export_cmd) return cmd_export_weights(export_ckpt, export_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const DegenerateRouterError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  }
  return kConfig;
}

}  // namespace ercmoe::cli
