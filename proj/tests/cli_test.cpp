#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI through the shell; stderr is folded into out.
Run cli(const std::string& args) {
  const std::string cmd = std::string(LLMBOOST_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto d = fs::path(::testing::TempDir()) / ("cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<nlohmann::json> json_lines(const std::string& s) {
  std::vector<nlohmann::json> out;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.front() == '{') out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

// One small trained ensemble shared by the decoding tests.
const fs::path& trained() {
  static const fs::path dir = [] {
    const auto d = scratch("trained");
    const auto r = cli("train --task copy --count 32 --epochs 2 --seeds 4 --out " + d.string());
    EXPECT_EQ(r.code, 0) << r.out;
    return d;
  }();
  return dir;
}

}  // namespace

TEST(CliGen, SameSeedIsByteIdentical) {
  const auto d = scratch("gen");
  ASSERT_EQ(cli("gen --task modsum --count 20 --seed 9 --out " + d.string() + " --file a.jsonl").code, 0);
  ASSERT_EQ(cli("gen --task modsum --count 20 --seed 9 --out " + d.string() + " --file b.jsonl").code, 0);
  ASSERT_EQ(cli("gen --task modsum --count 20 --seed 10 --out " + d.string() + " --file c.jsonl").code, 0);
  EXPECT_EQ(slurp(d / "a.jsonl"), slurp(d / "b.jsonl"));
  EXPECT_NE(slurp(d / "a.jsonl"), slurp(d / "c.jsonl"));
  EXPECT_EQ(json_lines(slurp(d / "a.jsonl")).size(), 20u);
}

TEST(CliGen, InvalidBoundsAreUsageErrors) {
  const auto d = scratch("gen_bad");
  EXPECT_EQ(cli("gen --task copy --min-len 6 --max-len 3 --out " + d.string()).code, 2);
  EXPECT_EQ(cli("gen --task sorting --out " + d.string()).code, 2);
}

TEST(CliTrain, WritesCheckpointsAndStageTwoColumns) {
  const auto& d = trained();
  EXPECT_TRUE(fs::exists(d / "seed_4" / "manifest.json"));
  EXPECT_TRUE(fs::exists(d / "seed_4" / "model_1.json"));
  EXPECT_TRUE(fs::exists(d / "summary.json"));
  bool saw_stage2 = false;
  for (const auto& j : json_lines(slurp(d / "seed_4" / "metrics.jsonl"))) {
    if (j["stage"] != 2) continue;
    saw_stage2 = true;
    EXPECT_TRUE(j.contains("suppression"));
    EXPECT_TRUE(j.contains("rho"));
    EXPECT_TRUE(j.contains("gamma"));
  }
  EXPECT_TRUE(saw_stage2);
}

TEST(CliTrain, RerunGivesIdenticalMetrics) {
  const auto d = scratch("rerun");
  const std::string args = "train --task reverse --count 16 --epochs 2 --seeds 3 --out ";
  ASSERT_EQ(cli(args + (d / "a").string()).code, 0);
  ASSERT_EQ(cli(args + (d / "b").string()).code, 0);
  EXPECT_EQ(slurp(d / "a" / "seed_3" / "metrics.jsonl"), slurp(d / "b" / "seed_3" / "metrics.jsonl"));
  EXPECT_EQ(slurp(d / "a" / "seed_3" / "model_1.json"), slurp(d / "b" / "seed_3" / "model_1.json"));
}

TEST(CliTrain, ConfigFileThenFlags) {
  const auto d = scratch("config");
  std::ofstream(d / "run.json") << R"({"task": {"kind": "needle", "count": 8}, "train": {"epochs": 1}, "seeds": [5]})";
  const auto r = cli("--config " + (d / "run.json").string() + " train --epochs 2 --members 1 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto cfg = nlohmann::json::parse(slurp(d / "config.json"));
  EXPECT_EQ(cfg["task"]["kind"], "needle");
  EXPECT_EQ(cfg["train"]["epochs"], 2);
  EXPECT_EQ(cfg["seeds"], nlohmann::json::array({5}));
  std::ofstream(d / "bad.json") << R"({"train": {"epoch": 1}})";
  const auto bad = cli("--config " + (d / "bad.json").string() + " train --out " + d.string());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("train.epoch"), std::string::npos);
}

TEST(CliInfer, SequentialAndPipelinedAgree) {
  const auto& d = trained();
  std::ofstream(d / "prompts.txt") << "1 2 3\n# comment\n\n4 4\n0\n";
  const std::string base = "infer --manifest " + (d / "seed_4" / "manifest.json").string() + " --prompts " +
                           (d / "prompts.txt").string() + " --max-tokens 6 --mode ";
  const auto s = cli(base + "sequential");
  const auto p = cli(base + "pipelined");
  ASSERT_EQ(s.code, 0) << s.out;
  ASSERT_EQ(p.code, 0) << p.out;
  const auto sl = json_lines(s.out), pl = json_lines(p.out);
  ASSERT_EQ(sl.size(), 4u);
  ASSERT_EQ(pl.size(), 4u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(sl[i]["tokens"], pl[i]["tokens"]);
  for (const auto* t : {&sl.back(), &pl.back()}) {
    const auto& timing = (*t)["timing"];
    for (const char* k : {"end_to_end_ms", "per_token_latency_ms", "blocked_ms", "state_passing_overhead_ms"}) {
      EXPECT_TRUE(timing.contains(k)) << k;
    }
  }
}

TEST(CliInfer, EmptyPromptFileIsEmptyOutput) {
  const auto& d = trained();
  std::ofstream(d / "empty.txt").close();
  const auto r = cli("infer --manifest " + (d / "seed_4" / "manifest.json").string() + " --prompts " +
                     (d / "empty.txt").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "");
}

TEST(CliInfer, VocabularyMismatchIsRefused) {
  const auto d = scratch("vocab");
  ASSERT_EQ(cli("train --task copy --count 8 --epochs 1 --members 1 --seeds 1 --out " + (d / "a").string()).code, 0);
  ASSERT_EQ(cli("train --task copy --vocab 20 --count 8 --epochs 1 --members 1 --seeds 1 --out " + (d / "b").string()).code,
            0);
  const nlohmann::json m = {{"kind", "llmboost.ensemble"},
                            {"format_version", 1},
                            {"models",
                             {{{"checkpoint", (d / "a" / "seed_1" / "model_0.json").string()}},
                              {{"checkpoint", (d / "b" / "seed_1" / "model_0.json").string()}}}},
                            {"lambdas", {0.3}}};
  std::ofstream(d / "manifest.json") << m.dump();
  std::ofstream(d / "p.txt") << "1 2\n";
  const auto r = cli("infer --manifest " + (d / "manifest.json").string() + " --prompts " + (d / "p.txt").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("incompatible tokenizers"), std::string::npos) << r.out;
}

TEST(CliBench, CsvFeedsSched) {
  const auto& d = trained();
  std::ofstream(d / "bench_prompts.txt") << "1 2\n3\n";
  const std::string base = "bench --manifest " + (d / "seed_4" / "manifest.json").string() + " --prompts " +
                           (d / "bench_prompts.txt").string() + " --max-tokens 3 --out " + d.string();
  EXPECT_EQ(cli(base + " --reps 2").code, 2);
  const auto r = cli(base + " --reps 3");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto csv = slurp(d / "bench.csv");
  EXPECT_EQ(csv.rfind("mode,metric,median,iqr,unit\n", 0), 0u);
  EXPECT_NE(csv.find("pipelined,state_passing_per_token,"), std::string::npos);
  EXPECT_NE(csv.find("ratio,pipelined_over_sequential,"), std::string::npos);
  const auto s = cli("sched k=2..2 l=4 g=2..2 --bench-csv " + (d / "bench.csv").string() + " --out " + d.string());
  EXPECT_EQ(s.code, 0) << s.out;
}

TEST(CliSched, Examples) {
  const auto d = scratch("sched");
  const auto r = cli("sched k=2..2 l=4..4 g=2..2 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto csv = slurp(d / "sched.csv");
  EXPECT_NE(csv.find("\n2,4,2,8,5,5,1.6"), std::string::npos) << csv;
  ASSERT_EQ(cli("sched g=1..1 --out " + d.string()).code, 0);
  std::istringstream in(slurp(d / "sched.csv"));
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    ASSERT_EQ(cols.size(), 8u);
    EXPECT_EQ(cols[6], "1") << line;
  }
  EXPECT_EQ(rows, 6 * 12);
}

TEST(CliSched, MalformedRangeIsUsageError) {
  const auto d = scratch("sched_bad");
  EXPECT_EQ(cli("sched k=1..x --out " + d.string()).code, 2);
  EXPECT_EQ(cli("sched q=3 --out " + d.string()).code, 2);
  EXPECT_EQ(cli("sched k=4..2 --out " + d.string()).code, 2);
}

TEST(CliVerify, SchedAndGradSuites) {
  const auto s = cli("verify sched");
  EXPECT_EQ(s.code, 0) << s.out;
  EXPECT_NE(s.out.find("PASS"), std::string::npos);
  const auto g = cli("verify grad");
  EXPECT_EQ(g.code, 0) << g.out;
  EXPECT_EQ(cli("verify nonsense").code, 2);
}

TEST(CliUsage, ExitCodes) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("--help").code, 0);
  EXPECT_EQ(cli("--precision f16 verify sched").code, 2);
}
