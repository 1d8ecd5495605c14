// llmboost command line: gen, train, infer, bench, verify, sched.
//
// Exit codes: 0 ok, 1 failure (training, verification, bad files),
// 2 usage error.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "llmboost/llmboost.hpp"

namespace fs = std::filesystem;
using namespace llmboost;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 1;
  bool seed_set = false;
  std::string out = ".";
  std::string precision = "f64";
  std::string config;
};

std::vector<std::vector<int>> read_prompts(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read prompt file " + path);
  std::vector<std::vector<int>> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    std::istringstream is(line);
    std::vector<int> p;
    std::string tok;
    while (is >> tok) {
      std::size_t pos = 0;
      int v = 0;
      try {
        v = std::stoi(tok, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != tok.size()) throw FormatError(path + ": bad token '" + tok + "'");
      p.push_back(v);
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::string out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out);
  return (fs::path(g.out) / name).string();
}

// ---------------------------------------------------------------------------
// gen

int cmd_gen(const Globals& g, RunConfig cfg, const std::string& file) {
  if (g.seed_set) cfg.task.seed = g.seed;
  else cfg.task.seed = cfg.seeds.front();
  const auto data = gen_dataset(cfg.task);
  const std::string path = out_path(g, file.empty() ? std::string(task_name(cfg.task.kind)) + ".jsonl" : file);
  save_dataset(data, path);
  std::cout << "wrote " << data.size() << " examples to " << path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

template <typename T>
int cmd_train(const Globals& g, const RunConfig& cfg) {
  fs::create_directories(g.out);
  {
    std::ofstream f(out_path(g, "config.json"));
    f << cfg.to_json().dump(2) << "\n";
  }
  nlohmann::json summary;
  summary["seeds"] = nlohmann::json::array();
  double sum_base = 0, sum_chain = 0;
  for (std::uint64_t seed : cfg.seeds) {
    Dataset train, test;
    std::string source = "held-out";
    if (!cfg.data_path.empty()) {
      train = load_dataset(cfg.data_path);
      if (!cfg.test_path.empty()) test = load_dataset(cfg.test_path);
      else {
        test = train;
        source = "train";
      }
    } else {
      TaskSpec t = cfg.task;
      t.seed = seed;
      train = gen_dataset(t);
      t.seed = seed + 1000;
      t.count = cfg.test_count;
      test = gen_dataset(t);
    }
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    const fs::path dir = fs::path(g.out) / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    std::ofstream metrics(dir / "metrics.jsonl");
    auto res = train_chain(Ensemble<T>::from_spec(cfg.ensemble_spec(seed)), train, tc,
                           [&](const EpochMetrics& m) { metrics << m.to_json().dump() << "\n"; });
    save_ensemble(res.ensemble, dir.string());
    const double base = token_accuracy(res.ensemble, test, 1);
    const double chain = token_accuracy(res.ensemble, test, res.ensemble.size());
    sum_base += base;
    sum_chain += chain;
    summary["seeds"].push_back({{"seed", seed}, {"base_accuracy", base}, {"chain_accuracy", chain},
                                {"accuracy_on", source}, {"manifest", (dir / "manifest.json").string()}});
    std::cout << "seed " << seed << std::fixed << std::setprecision(4) << "  base " << base;
    if (res.ensemble.size() > 1) std::cout << "  chain " << chain;
    std::cout << "  (" << source << ")\n";
  }
  const double n = static_cast<double>(cfg.seeds.size());
  summary["mean_base_accuracy"] = sum_base / n;
  summary["mean_chain_accuracy"] = sum_chain / n;
  std::ofstream(out_path(g, "summary.json")) << summary.dump(2) << "\n";
  std::cout << "mean" << std::fixed << std::setprecision(4) << "  base " << sum_base / n;
  if (cfg.members > 1) std::cout << "  chain " << sum_chain / n;
  std::cout << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// infer / bench

struct DecodeOpts {
  std::string manifest;
  std::string prompts;
  std::string mode = "sequential";
  int max_tokens = 8;
  int workers = 0;
  int timeout_ms = 5000;
  int reps = 5;
};

template <typename T>
DecodeResult<T> decode(const Ensemble<T>& ens, const std::vector<int>& prompt, const DecodeOpts& o, bool pipelined) {
  if (prompt.empty()) throw UsageError("empty prompt line");
  const int room = ens.models.front().spec().max_steps - static_cast<int>(prompt.size()) + 1;
  if (room < 1) throw UsageError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_steps");
  const int budget = std::min(o.max_tokens, room);
  if (pipelined) return decode_pipelined(ens, prompt, budget, PipelineOptions{o.workers, o.timeout_ms, false});
  return decode_sequential(ens, prompt, budget);
}

template <typename T>
int cmd_infer(const DecodeOpts& o) {
  const auto prompts = read_prompts(o.prompts);
  if (prompts.empty()) return 0;
  const auto ens = load_ensemble<T>(o.manifest);
  const bool pip = o.mode == "pipelined";
  double wall = 0, blocked = 0, passing = 0;
  std::size_t tokens = 0;
  for (const auto& p : prompts) {
    const auto r = decode(ens, p, o, pip);
    nlohmann::json line = {{"prompt", p}, {"tokens", r.tokens}};
    std::cout << line.dump() << "\n";
    wall += r.timing.wall_us;
    blocked += r.timing.blocked_us;
    passing += r.timing.state_passing_us;
    tokens += r.tokens.size();
  }
  nlohmann::json timing = {{"mode", o.mode},
                           {"end_to_end_ms", wall / 1e3},
                           {"per_token_latency_ms", tokens ? wall / 1e3 / static_cast<double>(tokens) : 0.0},
                           {"blocked_ms", blocked / 1e3},
                           {"state_passing_overhead_ms", passing / 1e3},
                           {"tokens", tokens}};
  std::cout << nlohmann::json{{"timing", timing}}.dump() << "\n";
  return 0;
}

struct Spread {
  double median = 0, iqr = 0;
};

Spread spread(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  auto q = [&](double f) {
    const double pos = f * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {q(0.5), q(0.75) - q(0.25)};
}

template <typename T>
int cmd_bench(const Globals& g, const DecodeOpts& o) {
  if (o.reps < 3) throw UsageError("bench needs --reps >= 3");
  const auto prompts = read_prompts(o.prompts);
  if (prompts.empty()) throw UsageError("bench needs at least one prompt");
  const auto ens = load_ensemble<T>(o.manifest);
  std::vector<double> seq_e2e, seq_tok, pip_e2e, pip_tok, pip_pass, pip_block;
  for (int r = 0; r < o.reps; ++r) {
    for (bool pip : {false, true}) {
      double passing = 0, blocked = 0;
      std::size_t tokens = 0;
      const auto a = Clock::now();
      for (const auto& p : prompts) {
        const auto res = decode(ens, p, o, pip);
        tokens += res.tokens.size();
        passing += res.timing.state_passing_us;
        blocked += res.timing.blocked_us;
      }
      const double us = micros_between(a, Clock::now());
      const double per = tokens ? us / static_cast<double>(tokens) : 0.0;
      (pip ? pip_e2e : seq_e2e).push_back(us);
      (pip ? pip_tok : seq_tok).push_back(per);
      if (pip) {
        pip_pass.push_back(tokens ? passing / static_cast<double>(tokens) : 0.0);
        pip_block.push_back(tokens ? blocked / static_cast<double>(tokens) : 0.0);
      }
    }
  }
  const auto se = spread(seq_e2e), st = spread(seq_tok), pe = spread(pip_e2e), pt = spread(pip_tok);
  const auto pp = spread(pip_pass), pb = spread(pip_block);
  const int layers = ens.models.front().n_layers() * static_cast<int>(ens.size());
  std::ostringstream csv;
  csv << std::setprecision(10) << "mode,metric,median,iqr,unit\n";
  csv << "sequential,end_to_end," << se.median << ',' << se.iqr << ",us\n";
  csv << "sequential,per_token," << st.median << ',' << st.iqr << ",us\n";
  csv << "sequential,layer_cost," << st.median / layers << ',' << st.iqr / layers << ",us\n";
  csv << "pipelined,end_to_end," << pe.median << ',' << pe.iqr << ",us\n";
  csv << "pipelined,per_token," << pt.median << ',' << pt.iqr << ",us\n";
  csv << "pipelined,state_passing_per_token," << pp.median << ',' << pp.iqr << ",us\n";
  csv << "pipelined,blocked_per_token," << pb.median << ',' << pb.iqr << ",us\n";
  csv << "ratio,pipelined_over_sequential," << pe.median / se.median << ",,x\n";
  const auto path = out_path(g, "bench.csv");
  std::ofstream(path) << csv.str();
  std::cout << csv.str() << "wrote " << path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// verify / sched

int cmd_verify(const std::string& selector) {
  const auto& sel = verify_selectors();
  if (std::find(sel.begin(), sel.end(), selector) == sel.end()) {
    throw UsageError("unknown suite '" + selector + "' (grad|remainder|mse|descent|sched|all)");
  }
  bool ok = true;
  for (const auto& r : run_verify(selector)) {
    std::cout << std::left << std::setw(10) << r.name << (r.passed ? "PASS" : "FAIL") << "  " << std::fixed
              << std::setprecision(2) << r.seconds << "s  " << r.summary << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

/// Reads c and delta from a bench CSV: sequential layer_cost and pipelined
/// state_passing_per_token, both in microseconds.
std::pair<double, double> bench_costs(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read bench CSV " + path);
  std::string line;
  std::getline(f, line);
  if (line.rfind("mode,metric,median", 0) != 0) throw FormatError(path + ": not a bench CSV");
  double c = -1, delta = -1;
  while (std::getline(f, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cols.push_back(cell);
    if (cols.size() < 3) continue;
    if (cols[0] == "sequential" && cols[1] == "layer_cost") c = std::stod(cols[2]);
    if (cols[0] == "pipelined" && cols[1] == "state_passing_per_token") delta = std::stod(cols[2]);
  }
  if (c <= 0 || delta < 0) throw FormatError(path + ": missing layer_cost or state_passing_per_token rows");
  return {c, delta};
}

int cmd_sched(const Globals& g, const std::vector<std::string>& tokens, const std::string& bench_csv) {
  SweepSpec sw;
  try {
    sw = parse_sweep(tokens);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  if (!bench_csv.empty()) std::tie(sw.c, sw.delta) = bench_costs(bench_csv);
  const auto rows = speedup_table(sw);
  std::cout << format_table_text(rows);
  const auto path = out_path(g, "sched.csv");
  std::ofstream(path) << format_table_csv(rows);
  std::cout << "wrote " << path << "\n";
  const bool agree = std::all_of(rows.begin(), rows.end(), [](const SpeedupRow& r) { return r.agree; });
  return agree ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"llmboost: chained transformer ensembles on toy tasks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Seed (overrides the config's seed list)");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--precision", g.precision, "Floating point precision")
      ->check(CLI::IsMember({"f64", "f32"}))
      ->capture_default_str();
  app.add_option("--config", g.config, "JSON run config")->check(CLI::ExistingFile);

  // Flags shared by gen and train; each overrides the config file.
  RunConfig flags = RunConfig::defaults();
  std::string task_kind, seeds_csv;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> overrides;
  auto task_flags = [&](CLI::App* sub) {
    overrides.push_back({sub->add_option("--task", task_kind, "copy|reverse|modsum|needle"),
                         [&](RunConfig& c) { c.task.kind = parse_task(task_kind); }});
    overrides.push_back({sub->add_option("--vocab", flags.task.vocab),
                         [&](RunConfig& c) { c.task.vocab = c.model.vocab = flags.task.vocab; }});
    overrides.push_back({sub->add_option("--count", flags.task.count), [&](RunConfig& c) { c.task.count = flags.task.count; }});
    overrides.push_back({sub->add_option("--min-len", flags.task.min_len),
                         [&](RunConfig& c) { c.task.min_len = flags.task.min_len; }});
    overrides.push_back({sub->add_option("--max-len", flags.task.max_len),
                         [&](RunConfig& c) { c.task.max_len = flags.task.max_len; }});
    overrides.push_back({sub->add_option("--modulus", flags.task.modulus),
                         [&](RunConfig& c) { c.task.modulus = flags.task.modulus; }});
  };

  std::string gen_file;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic task dataset (JSONL)");
  task_flags(gen);
  gen->add_option("--file", gen_file, "File name inside --out (default <task>.jsonl)");

  auto* train = app.add_subcommand("train", "Train a model chain per seed");
  task_flags(train);
  overrides.push_back({train->add_option("--data", flags.data_path, "JSONL corpus instead of a generated task"),
                       [&](RunConfig& c) { c.data_path = flags.data_path; }});
  overrides.push_back({train->add_option("--test", flags.test_path, "JSONL held-out set for --data"),
                       [&](RunConfig& c) { c.test_path = flags.test_path; }});
  overrides.push_back({train->add_option("--members", flags.members, "Models in the chain (1 = base only)"),
                       [&](RunConfig& c) { c.members = flags.members; }});
  overrides.push_back({train->add_option("--layers", flags.model.n_layers), [&](RunConfig& c) { c.model.n_layers = flags.model.n_layers; }});
  overrides.push_back({train->add_option("--d-model", flags.model.d_model), [&](RunConfig& c) { c.model.d_model = flags.model.d_model; }});
  overrides.push_back({train->add_option("--heads", flags.model.n_heads), [&](RunConfig& c) { c.model.n_heads = flags.model.n_heads; }});
  overrides.push_back({train->add_option("--d-ff", flags.model.d_ff), [&](RunConfig& c) { c.model.d_ff = flags.model.d_ff; }});
  overrides.push_back({train->add_option("--max-steps", flags.model.max_steps),
                       [&](RunConfig& c) { c.model.max_steps = flags.model.max_steps; }});
  overrides.push_back({train->add_option("--fusion-period", flags.model.fusion_period),
                       [&](RunConfig& c) { c.model.fusion_period = flags.model.fusion_period; }});
  overrides.push_back({train->add_option("--adapter-rank", flags.model.adapter_rank),
                       [&](RunConfig& c) { c.model.adapter_rank = flags.model.adapter_rank; }});
  overrides.push_back({train->add_option("--epochs", flags.train.epochs), [&](RunConfig& c) { c.train.epochs = flags.train.epochs; }});
  overrides.push_back({train->add_option("--lr", flags.train.learning_rate),
                       [&](RunConfig& c) { c.train.learning_rate = flags.train.learning_rate; }});
  overrides.push_back({train->add_option("--batch-size", flags.train.batch_size),
                       [&](RunConfig& c) { c.train.batch_size = flags.train.batch_size; }});
  overrides.push_back({train->add_option("--alpha", flags.train.alpha), [&](RunConfig& c) { c.train.alpha = flags.train.alpha; }});
  overrides.push_back({train->add_option("--beta", flags.train.beta), [&](RunConfig& c) { c.train.beta = flags.train.beta; }});
  overrides.push_back({train->add_option("--lambda", flags.lambda), [&](RunConfig& c) { c.lambda = flags.lambda; }});
  overrides.push_back({train->add_option("--top-k", flags.top_k), [&](RunConfig& c) { c.top_k = flags.top_k; }});
  overrides.push_back({train->add_option("--seeds", seeds_csv, "Comma separated, default 1,2,3"), [&](RunConfig& c) {
                         c.seeds.clear();
                         std::stringstream ss(seeds_csv);
                         for (std::string s; std::getline(ss, s, ',');) {
                           try {
                             c.seeds.push_back(std::stoull(s));
                           } catch (const std::exception&) {
                             throw UsageError("bad seed '" + s + "'");
                           }
                         }
                       }});

  DecodeOpts dec;
  auto decode_flags = [&](CLI::App* sub) {
    sub->add_option("--manifest", dec.manifest, "Ensemble manifest.json")->required()->check(CLI::ExistingFile);
    sub->add_option("--prompts", dec.prompts, "One prompt per line, whitespace separated token ids")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--max-tokens", dec.max_tokens)->capture_default_str()->check(CLI::NonNegativeNumber);
    sub->add_option("--workers", dec.workers, "Pipeline executors (0 = one per model)")->capture_default_str();
    sub->add_option("--timeout-ms", dec.timeout_ms)->capture_default_str();
  };
  auto* infer = app.add_subcommand("infer", "Decode prompts with a trained ensemble");
  decode_flags(infer);
  infer->add_option("--mode", dec.mode)->check(CLI::IsMember({"sequential", "pipelined"}))->capture_default_str();

  auto* bench = app.add_subcommand("bench", "Latency of sequential vs pipelined decoding");
  decode_flags(bench);
  bench->add_option("--reps", dec.reps, "Repetitions (>= 3)")->capture_default_str();

  std::string selector = "all";
  auto* verify = app.add_subcommand("verify", "Run numerical self-checks");
  verify->add_option("suite", selector, "grad|remainder|mse|descent|sched|all")->capture_default_str();

  std::vector<std::string> sweep;
  std::string bench_csv;
  auto* sched = app.add_subcommand("sched", "Speedup table of the layer-pipelined schedule");
  sched->add_option("ranges", sweep, "k=1..6 l=1..12 g=1..4 c=1 delta=0");
  sched->add_option("--bench-csv", bench_csv, "Take c and delta from a bench report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  g.seed_set = seed_opt->count() > 0;

  try {
    RunConfig cfg = g.config.empty() ? RunConfig::defaults() : RunConfig::from_file(g.config);
    for (auto& [opt, apply] : overrides) {
      try {
        if (opt->count() > 0) apply(cfg);
      } catch (const ContractError& e) {
        throw UsageError(e.what());
      }
    }
    if (g.seed_set) cfg.seeds = {g.seed};
    const bool f32 = g.precision == "f32";
    if (*gen) {
      try {
        cfg.task.validate();
      } catch (const ContractError& e) {
        throw UsageError(e.what());
      }
      return cmd_gen(g, cfg, gen_file);
    }
    if (*train) {
      if (cfg.data_path.empty()) cfg.model.vocab = cfg.task.vocab;
      try {
        cfg.validate();
      } catch (const ContractError& e) {
        throw UsageError(e.what());
      }
      if (f32) cfg.train.precision = Precision::F32;
      return f32 ? cmd_train<float>(g, cfg) : cmd_train<double>(g, cfg);
    }
    if (*infer) return f32 ? cmd_infer<float>(dec) : cmd_infer<double>(dec);
    if (*bench) return f32 ? cmd_bench<float>(g, dec) : cmd_bench<double>(g, dec);
    if (*verify) return cmd_verify(selector);
    if (*sched) return cmd_sched(g, sweep, bench_csv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
