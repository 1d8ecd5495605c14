#pragma once

// Self-check suites behind `llmboost verify`, plus the toy chain setups they
// and the acceptance runner share.

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "llmboost/schedlab.hpp"
#include "llmboost/tasks.hpp"
#include "llmboost/theoryprobe.hpp"
#include "llmboost/training.hpp"

namespace llmboost {

struct SuiteResult {
  std::string name;
  bool passed = false;
  double seconds = 0;
  std::string summary;
  nlohmann::json detail = nlohmann::json::object();
};

// ---------------------------------------------------------------------------
// Toy chain setups.

struct ChainSetup {
  TaskSpec task;
  int test_count = 128;
  ModelSpec model;
  TrainConfig train;
  double lambda = 0.3;
  int top_k = 2;
};

/// Defaults sized for a single CPU core: two 2-layer models of width 32.
inline ChainSetup default_chain_setup(TaskKind kind, std::uint64_t seed) {
  ChainSetup s;
  s.task.kind = kind;
  s.task.vocab = 16;
  s.task.min_len = 6;
  s.task.max_len = 6;
  s.task.count = 256;
  s.task.modulus = 5;
  s.task.seed = seed;
  s.model.n_layers = 2;
  s.model.d_model = 32;
  s.model.n_heads = 4;
  s.model.d_ff = 64;
  s.model.vocab = 16;
  s.model.max_steps = 16;
  s.model.fusion_period = 2;
  s.model.adapter_rank = 0;
  s.train.epochs = 40;
  s.train.learning_rate = 0.1;
  s.train.seed = seed;
  return s;
}

inline EnsembleSpec chain_spec(const ChainSetup& s, int members) {
  EnsembleSpec es;
  for (int i = 0; i < members; ++i) {
    ModelSpec m = s.model;
    m.seed = s.task.seed * 10 + static_cast<std::uint64_t>(i);
    es.models.push_back(m);
  }
  es.lambdas.assign(static_cast<std::size_t>(members - 1), s.lambda);
  es.top_k = s.top_k;
  return es;
}

struct ChainRun {
  Ensemble<double> ensemble;
  Dataset train, test;
  std::vector<EpochMetrics> metrics;
};

/// Held-out data comes from a disjoint seed stream.
inline ChainRun run_chain(const ChainSetup& s, int members = 2) {
  ChainRun r;
  r.train = gen_dataset(s.task);
  TaskSpec held = s.task;
  held.seed = s.task.seed + 1000;
  held.count = s.test_count;
  r.test = gen_dataset(held);
  auto res = train_chain(Ensemble<double>::from_spec(chain_spec(s, members)), r.train, s.train);
  r.ensemble = std::move(res.ensemble);
  r.metrics = std::move(res.metrics);
  return r;
}

/// Descent setting: a stage-1 trained base model and a fresh successor
/// evaluated full-batch over a small training set.
struct DescentCase {
  Dataset data;
  Ensemble<double> ensemble;
  std::vector<ChainSample<double>> samples;
};

inline DescentCase make_descent_case(TaskKind kind, std::uint64_t seed, int examples = 48, int base_epochs = 10) {
  ChainSetup s = default_chain_setup(kind, seed);
  s.task.count = examples;
  s.model.d_model = 16;
  s.model.d_ff = 32;
  s.model.n_heads = 2;
  s.train.epochs = base_epochs;
  DescentCase c;
  c.data = gen_dataset(s.task);
  const auto spec = chain_spec(s, 2);
  EnsembleSpec base_spec;
  base_spec.models = {spec.models[0]};
  auto base = train_chain(Ensemble<double>::from_spec(base_spec), c.data, s.train).ensemble;
  c.ensemble = Ensemble<double>::from_spec(spec);
  c.ensemble.models[0] = base.models[0];
  c.samples = prepare_samples(c.ensemble, 1, c.data);
  return c;
}

// ---------------------------------------------------------------------------
// Suites.

namespace detail {

template <typename F>
SuiteResult timed(const std::string& name, F&& body) {
  const auto a = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = name;
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.summary = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count();
  return r;
}

}  // namespace detail

/// Analytic logit gradient of the per-position objective against central
/// differences of the forward loss over random draws.
inline SuiteResult verify_grad(int draws = 1000, std::uint64_t seed = 2024) {
  return detail::timed("grad", [&](SuiteResult& r) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> vdist(2, 12);
    std::uniform_real_distribution<double> a(0.05, 2.0), b(0.01, 2.0), sd(0.3, 3.0);
    std::bernoulli_distribution has_err(0.8);
    double worst = 0;
    for (int k = 0; k < draws; ++k) {
      const int V = vdist(rng);
      const auto z = random_normal<double>({static_cast<std::size_t>(V)}, rng, sd(rng));
      std::uniform_int_distribution<int> tok(0, V - 1);
      const int gold = tok(rng);
      std::optional<int> err;
      if (has_err(rng)) {
        int e = tok(rng);
        if (e == gold) e = (e + 1) % V;
        err = e;
      }
      const double alpha = a(rng), beta = b(rng);
      const auto g = loss_logit_grad(softmax(z), gold, err, alpha, beta);
      const auto fd = finite_diff_grad<double>(
          [&](const Tensor<double>& x) {
            const auto p = softmax(x);
            return suppression_loss(p, gold, err, beta).value + alpha * cross_entropy(p, gold).value;
          },
          z, 1e-5);
      double diff = 0, norm = 0;
      for (std::size_t i = 0; i < z.size(); ++i) {
        diff = std::max(diff, std::abs(g[i] - fd[i]));
        norm = std::max(norm, std::abs(fd[i]));
      }
      worst = std::max(worst, diff / std::max(norm, 1e-8));
    }
    r.passed = worst < 1e-5;
    r.detail = {{"draws", draws}, {"worst_relative_error", worst}};
    std::ostringstream os;
    os << draws << " draws, worst relative error " << worst;
    r.summary = os.str();
  });
}

/// Remainder exponent and envelope at base_points random base points for
/// each V in {4, 16, 64}.
inline SuiteResult verify_remainder(int base_points = 10, std::uint64_t seed = 11) {
  return detail::timed("remainder", [&](SuiteResult& r) {
    std::mt19937_64 rng(seed);
    double lo = 1e9, hi = -1e9, c_max = 0;
    bool ok = true;
    int runs = 0;
    for (int V : {4, 16, 64}) {
      for (int b = 0; b < base_points; ++b) {
        const auto z = random_normal<double>({static_cast<std::size_t>(V)}, rng, 2.0);
        const auto rep = remainder_probe(z, log_spaced(1e-3, 1e-1, 9), 16, rng());
        lo = std::min(lo, rep.exponent);
        hi = std::max(hi, rep.exponent);
        c_max = std::max(c_max, rep.c_fit);
        ok = ok && rep.envelope_ok && rep.exponent >= 1.9 && rep.exponent <= 2.1;
        ++runs;
      }
    }
    r.passed = ok;
    r.detail = {{"probes", runs}, {"exponent_min", lo}, {"exponent_max", hi}, {"c_fit_max", c_max},
                {"c_bound", kSoftmaxRemainderBound}};
    std::ostringstream os;
    os << runs << " probes, exponent in [" << lo << ", " << hi << "], max C_fit " << c_max;
    r.summary = os.str();
  });
}

/// Synthetic instances whose corrector leans toward the gold token.
inline std::vector<MseInstance> synthetic_mse_instances(int count, std::size_t V, double lean, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(V) - 1);
  std::vector<MseInstance> out;
  for (int i = 0; i < count; ++i) {
    MseInstance m;
    m.z_prev = random_normal<double>({V}, rng, 1.5);
    m.z_new = random_normal<double>({V}, rng, 0.5);
    m.gold = tok(rng);
    m.z_new[static_cast<std::size_t>(m.gold)] += lean;
    out.push_back(std::move(m));
  }
  return out;
}

inline SuiteResult verify_mse(std::uint64_t seed = 2) {
  return detail::timed("mse", [&](SuiteResult& r) {
    const auto rep = mse_sweep(synthetic_mse_instances(400, 8, 2.0, seed), log_spaced(1e-3, 0.5, 25));
    const double ratio = (rep.delta_mse.front() / rep.lambdas.front()) / (-2.0 * rep.mean_eg);
    r.passed = rep.has_working_range && rep.working_lo <= 0.5 && std::abs(ratio - 1.0) <= 0.05;
    r.detail = rep.to_json();
    r.detail["linear_ratio"] = ratio;
    std::ostringstream os;
    os << "working range " << (rep.has_working_range ? "found" : "absent") << ", dMSE/lambda over -2 mean(e.g) = "
       << ratio;
    r.summary = os.str();
  });
}

inline DescentReport run_descent_case(TaskKind kind, std::uint64_t seed, int steps) {
  const auto c = make_descent_case(kind, seed);
  DescentConfig cfg;
  cfg.steps = steps;
  cfg.pilot_steps = steps;
  cfg.seed = seed;
  return descent_probe(c.ensemble.models[1], c.samples, cfg);
}

inline SuiteResult verify_descent(int steps = 200) {
  return detail::timed("descent", [&](SuiteResult& r) {
    r.passed = true;
    std::ostringstream os;
    for (TaskKind kind : {TaskKind::ModSum, TaskKind::Copy}) {
      const auto rep = run_descent_case(kind, 1, steps);
      r.detail[task_name(kind)] = rep.to_json();
      r.passed = r.passed && rep.precondition_ok && rep.violations == 0;
      os << task_name(kind) << ": " << rep.violations << " violations over " << steps << " steps";
      if (!rep.precondition_ok) os << " (" << rep.precondition_message << ")";
      os << "; ";
    }
    r.summary = os.str();
    if (r.summary.size() >= 2) r.summary.resize(r.summary.size() - 2);
  });
}

inline SuiteResult verify_sched() {
  return detail::timed("sched", [&](SuiteResult& r) {
    int cells = 0, mismatches = 0, limit_failures = 0;
    for (const auto& row : speedup_table({{1, 6}, {1, 12}, {1, 4}, 1.0, 0.0})) {
      ++cells;
      mismatches += !row.agree;
      if (row.g == 1 && row.speedup != 1.0) ++limit_failures;
      if (row.g >= std::min(row.k, row.l)) {
        const double want = static_cast<double>(row.k * row.l) / (row.k + row.l - 1);
        if (std::abs(row.speedup - want) > 1e-12 * want) ++limit_failures;
      }
    }
    r.passed = mismatches == 0 && limit_failures == 0;
    r.detail = {{"cells", cells}, {"mismatches", mismatches}, {"limit_failures", limit_failures}};
    r.summary = std::to_string(cells) + " cells, " + std::to_string(mismatches) + " closed/simulated mismatches, " +
                std::to_string(limit_failures) + " limit failures";
  });
}

inline const std::vector<std::string>& verify_selectors() {
  static const std::vector<std::string> s{"grad", "remainder", "mse", "descent", "sched", "all"};
  return s;
}

inline std::vector<SuiteResult> run_verify(const std::string& selector) {
  std::vector<SuiteResult> out;
  const bool all = selector == "all";
  if (!all && std::find(verify_selectors().begin(), verify_selectors().end(), selector) == verify_selectors().end()) {
    throw ContractError("unknown verify selector '" + selector + "'");
  }
  if (all || selector == "grad") out.push_back(verify_grad());
  if (all || selector == "remainder") out.push_back(verify_remainder());
  if (all || selector == "mse") out.push_back(verify_mse());
  if (all || selector == "descent") out.push_back(verify_descent());
  if (all || selector == "sched") out.push_back(verify_sched());
  return out;
}

}  // namespace llmboost
