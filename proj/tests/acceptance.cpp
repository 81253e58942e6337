// Acceptance gate: one line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ercmoe/checkpoint.hpp"
#include "ercmoe/cli.hpp"
#include "ercmoe/ercmoe.hpp"

using namespace ercmoe;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const Outcome& o) {
  std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

template <class... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared toy setup: n = 8, K = 2, d = 32, D = 16, 8 clusters, 2 layers.

constexpr std::size_t kToySteps = 2000;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

ModelShape toy_shape() {
  ModelShape s;
  s.layers = 2;
  s.num_experts = 8;
  s.top_k = 2;
  s.model_dim = 32;
  s.hidden_dim = 16;
  return s;
}

ClusterTaskSpec toy_task(std::uint64_t seed) {
  ClusterTaskSpec spec;
  spec.clusters = 8;
  spec.dim = 32;
  spec.seed = seed;
  return spec;
}

TrainConfig toy_train(std::uint64_t seed, bool erc, double alpha) {
  TrainConfig c;
  c.steps = kToySteps;
  c.seed = seed;
  c.log_every = 100;
  c.objective.erc_enabled = erc;
  c.objective.alpha = alpha;
  return c;
}

struct ToyRun {
  TrainResult result;
  double seconds = 0.0;

  std::vector<MetricsRow> final_rows() const {
    std::vector<MetricsRow> rows;
    for (const MetricsRow& r : result.metrics)
      if (r.step + 1 == kToySteps) rows.push_back(r);
    return rows;
  }
};

ToyRun toy_run(std::uint64_t seed, bool erc, double alpha) {
  const auto t0 = Clock::now();
  ToyRun run{train(Model::init(toy_shape(), seed), ClusterTask(toy_task(seed)), toy_train(seed, erc, alpha)), 0.0};
  run.seconds = seconds_since(t0);
  return run;
}

// Mean over layers of the per-cluster hard-routing entropy on a held-out batch.
double heldout_entropy(const Model& trained, std::uint64_t seed) {
  Model m = trained;
  const Batch batch = ClusterTask(toy_task(seed)).batch(1'000'000);
  Rng rng(0);
  const NoisePlan noise = sample_noise_plan(m, false, rng);
  Tape tape;
  const Objective obj = build_objective(tape, m, batch, ObjectiveWeights{}, noise);
  double total = 0.0;
  for (const LayerTerms& lt : obj.layers) total += cluster_routing_entropy(lt.routing, batch.cluster_ids, 8);
  return total / static_cast<double>(obj.layers.size());
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

int run_cli(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = cli::run(args, o, e);
  if (out) *out = o.str();
  return code;
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  ModelShape s;
  s.layers = 2;
  s.num_experts = 4;
  s.top_k = 2;
  s.model_dim = 16;
  s.hidden_dim = 8;
  Model m = Model::init(s, 1);
  ClusterTaskSpec spec;
  spec.dim = 16;
  spec.clusters = 4;
  spec.tokens = 32;
  spec.seed = 1;
  const Batch batch = generate(spec);
  Rng rng = make_rng(1, kNoiseStream, 0);
  const NoisePlan noise = sample_noise_plan(m, true, rng);
  ObjectiveWeights w;
  w.lb_weight = 0.01;
  w.erc_weight = 1.0;
  const GradCheckReport rep =
      grad_check([&](Tape& t) { return build_objective(t, m, batch, w, noise).total; }, m.parameters());
  const double secs = seconds_since(t0);
  return {rep.max_rel_error < 1e-4 && secs < 60.0,
          fmt("max rel err %.3g over %zu params (< 1e-4), %.1f s (< 60 s)", rep.max_rel_error, rep.checked, secs)};
}

Outcome noise_soundness() {
  const auto t0 = Clock::now();
  std::size_t violations = 0, samples = 0, corners = 0;
  bool tight = true;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const NoiseCheckReport rep = noise_check(8, 16, 100000, 1000, seed);
    violations += rep.violations();
    samples += rep.uniform_samples;
    corners += rep.corner_trials;
    tight = tight && rep.tight_within_exact;
  }
  const double secs = seconds_since(t0);
  return {violations == 0 && secs < 30.0,
          fmt("%zu violations over %zu uniform + %zu corner trials, 20 seeds, %.1f s (< 30 s)", violations, samples,
              corners, secs)};
}

Outcome flops_golden() {
  std::string text;
  if (run_cli({"flops", "--preset", "15b"}, &text) != 0) return {false, "flops --preset 15b failed"};
  const double p15 = nlohmann::json::parse(text)["erc_ratio_percent"].get<double>();
  if (run_cli({"flops", "--preset", "3b"}, &text) != 0) return {false, "flops --preset 3b failed"};
  const double p3 = nlohmann::json::parse(text)["erc_ratio_percent"].get<double>();
  bool ok = std::abs(p15 - 0.72) <= 0.02 && std::abs(p3 - 0.18) <= 0.02;

  std::string counts;
  for (std::size_t n : {4u, 16u, 64u}) {
    Rng rng(n);
    const MoeLayer layer = MoeLayer::init(n, 32, 16, rng);
    Tape t;
    compute_M(bind_constant(t, layer), t.constant(layer.router));
    const std::uint64_t flops = 2 * t.multiply_adds();
    const std::uint64_t want = 2ull * n * n * 16 * 32;
    ok = ok && flops == want;
    counts += fmt(" n=%zu:%llu/%llu", n, static_cast<unsigned long long>(flops), static_cast<unsigned long long>(want));
  }
  return {ok, fmt("15B %.4f%%, 3B %.4f%% (+-0.02 pp); compute_M FLOPs vs 2n^2Dd", p15, p3) + counts};
}

Outcome erc_convergence(const std::map<std::uint64_t, ToyRun>& runs) {
  bool ok = true;
  double worst = 0.0, slowest = 0.0;
  for (const auto& [seed, run] : runs) {
    for (const MetricsRow& r : run.final_rows()) worst = std::max(worst, r.erc_loss);
    slowest = std::max(slowest, run.seconds);
  }
  ok = worst < 1e-3 && slowest < 600.0;
  return {ok, fmt("alpha=1, %zu steps, seeds 1-3: worst final per-layer erc_loss %.3g (< 1e-3), slowest run %.1f s",
                  kToySteps, worst, slowest)};
}

Outcome alpha_degeneration(const std::map<std::uint64_t, ToyRun>& vanilla, const fs::path& scratch) {
  bool ok = true;
  std::string detail;
  for (const auto& [seed, run] : vanilla) {
    const fs::path ckpt = scratch / ("vanilla_" + std::to_string(seed) + ".bin");
    save_checkpoint(ckpt.string(), run.result.model);
    std::string csv;
    if (run_cli({"erc-eval", "--checkpoint", ckpt.string()}, &csv) != 0) return {false, "erc-eval failed"};
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    std::map<std::size_t, std::vector<std::pair<double, double>>> per_layer;
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string a, b, c;
      std::getline(ss, a, ',');
      std::getline(ss, b, ',');
      std::getline(ss, c, ',');
      per_layer[std::stoul(a)].emplace_back(std::stod(b), std::stod(c));
    }
    detail += fmt(" seed %llu:", static_cast<unsigned long long>(seed));
    for (const auto& [layer, rows] : per_layer) {
      double at_one = -1.0, zero_at = -1.0, prev = 1e300;
      bool monotone = true;
      for (const auto& [alpha, loss] : rows) {
        if (alpha == 1.0) at_one = loss;
        if (loss > prev) monotone = false;
        prev = loss;
        if (loss == 0.0 && alpha <= 32.0 && zero_at < 0.0) zero_at = alpha;
      }
      ok = ok && at_one > 0.0 && monotone && zero_at >= 0.0;
      detail += fmt(" L%zu L(1)=%.3f zero@%g%s", layer, at_one, zero_at, monotone ? "" : " NON-MONOTONE");
    }
  }
  return {ok, "vanilla checkpoints, loss>0 at alpha=1, non-increasing, 0 by alpha<=32;" + detail};
}

double final_eps_mean(const ToyRun& run) {
  double total = 0.0;
  const auto rows = run.final_rows();
  for (const MetricsRow& r : rows) total += r.eps_mean;
  return total / static_cast<double>(rows.size());
}

Outcome eps_alpha_trend(const std::map<std::uint64_t, ToyRun>& strong, const std::map<std::uint64_t, ToyRun>& loose) {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : kSeeds) {
    const double a = final_eps_mean(loose.at(seed)), b = final_eps_mean(strong.at(seed));
    ok = ok && a > b;
    detail += fmt(" seed %llu: %.4f vs %.4f;", static_cast<unsigned long long>(seed), a, b);
  }
  return {ok, "final eps_mean alpha=0.4 > alpha=1:" + detail};
}

Outcome specialization(const std::map<std::uint64_t, ToyRun>& erc, const std::map<std::uint64_t, ToyRun>& vanilla) {
  double erc_mean = 0.0, vanilla_mean = 0.0;
  std::string detail;
  for (std::uint64_t seed : kSeeds) {
    const double a = heldout_entropy(erc.at(seed).result.model, seed);
    const double b = heldout_entropy(vanilla.at(seed).result.model, seed);
    erc_mean += a / 3.0;
    vanilla_mean += b / 3.0;
    detail += fmt(" seed %llu: %.4f vs %.4f;", static_cast<unsigned long long>(seed), a, b);
  }
  return {erc_mean < vanilla_mean,
          fmt("mean per-cluster routing entropy ERC %.4f vs vanilla %.4f (floor ln K = %.4f);", erc_mean, vanilla_mean,
              std::log(2.0)) +
              detail};
}

Outcome equivalence_oracles() {
  double worst_m = 0.0, worst_dense = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const MoeLayer l = MoeLayer::init(6, 8, 5, rng);
    const ProxyRows p = sample_proxy(l.router, compute_eps(l.router), rng);
    const Tensor fast = compute_M(l, p.rows);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        double sq = 0.0;
        for (std::size_t c = 0; c < 5; ++c) {
          double a = 0.0;
          for (std::size_t k = 0; k < 8; ++k) a += p.rows(i, k) * l.experts[j].gate(k, c);
          sq += a * a;
        }
        worst_m = std::max(worst_m, std::abs(fast(i, j) - std::sqrt(sq)));
      }

    const Tensor x = normal_tensor({16, 8}, 1.0, rng);
    const Tensor y = moe_forward(l, x, 6).output;
    for (std::size_t t = 0; t < 16; ++t) {
      std::vector<double> w(6);
      double mx = -1e300, z = 0.0;
      for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t k = 0; k < 8; ++k) w[i] += x(t, k) * l.router(i, k);
        mx = std::max(mx, w[i]);
      }
      for (double& v : w) z += (v = std::exp(v - mx));
      std::vector<double> dense(8, 0.0);
      for (std::size_t i = 0; i < 6; ++i) {
        const Expert& e = l.experts[i];
        std::vector<double> h(5);
        for (std::size_t c = 0; c < 5; ++c) {
          double g = 0.0, q = 0.0;
          for (std::size_t k = 0; k < 8; ++k) {
            g += x(t, k) * e.gate(k, c);
            q += x(t, k) * e.proj(k, c);
          }
          h[c] = g / (1.0 + std::exp(-g)) * q;
        }
        for (std::size_t k = 0; k < 8; ++k) {
          double o = 0.0;
          for (std::size_t c = 0; c < 5; ++c) o += h[c] * e.out(c, k);
          dense[k] += w[i] / z * o;
        }
      }
      for (std::size_t k = 0; k < 8; ++k) worst_dense = std::max(worst_dense, std::abs(y(t, k) - dense[k]));
    }
  }
  const double one = erc_loss(Tensor::matrix({{1, 2}, {2, 1}}), 1.0);
  const double fifth = erc_loss(Tensor::matrix({{2, 1}, {1, 2}}), 0.4);
  // 0.2 is not a binary fraction; "exactly" means the nearest double to the hand value.
  const bool ok = worst_m <= 1e-12 && worst_dense <= 1e-12 && one == 1.0 && std::abs(fifth - 0.2) <= 1e-16;
  return {ok, fmt("compute_M vs loop %.2g, K=n vs dense %.2g (<= 1e-12); erc_loss %.17g and %.17g", worst_m,
                  worst_dense, one, fifth)};
}

Outcome determinism(const fs::path& scratch) {
  const nlohmann::json cfg{{"n", 8}, {"K", 2}, {"d", 32}, {"D", 16}, {"clusters", 8}, {"steps", 200}, {"seed", 7}};
  const fs::path config = scratch / "determinism.json";
  std::ofstream(config) << cfg.dump();
  const fs::path a = scratch / "run_a", b = scratch / "run_b";
  if (run_cli({"train", "--config", config.string(), "--out", a.string()}) != 0) return {false, "train run A failed"};
  if (run_cli({"train", "--config", config.string(), "--out", b.string()}) != 0) return {false, "train run B failed"};
  const std::string ca = slurp(a / "checkpoint.bin"), cb = slurp(b / "checkpoint.bin");
  const std::string ma = slurp(a / "metrics.csv"), mb = slurp(b / "metrics.csv");
  const bool ok = !ca.empty() && ca == cb && !ma.empty() && ma == mb;
  return {ok, fmt("checkpoint %zu bytes %s, metrics %zu bytes %s", ca.size(), ca == cb ? "identical" : "DIFFER",
                  ma.size(), ma == mb ? "identical" : "DIFFER")};
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  const fs::path scratch = fs::temp_directory_path() / "ercmoe_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  report(1, "gradient fidelity", gradient_fidelity());
  report(2, "noise-bound soundness", noise_soundness());
  report(3, "flops golden values", flops_golden());

  std::map<std::uint64_t, ToyRun> erc_strong, erc_loose, vanilla;
  for (std::uint64_t seed : kSeeds) {
    erc_strong.emplace(seed, toy_run(seed, true, 1.0));
    erc_loose.emplace(seed, toy_run(seed, true, 0.4));
    vanilla.emplace(seed, toy_run(seed, false, 1.0));
  }

  report(4, "erc convergence", erc_convergence(erc_strong));
  report(5, "alpha degeneration", alpha_degeneration(vanilla, scratch));
  report(6, "eps-alpha trend", eps_alpha_trend(erc_strong, erc_loose));
  report(7, "specialization proxy", specialization(erc_strong, vanilla));
  report(8, "equivalence oracles", equivalence_oracles());
  report(9, "determinism", determinism(scratch));

  fs::remove_all(scratch);
  std::printf("%d of 9 criteria failed, %.1f s\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
