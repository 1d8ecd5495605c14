#include <gtest/gtest.h>

#include <atomic>
#include <set>
#include <thread>

#include "llmboost/pipeline.hpp"

using namespace llmboost;
using Vec = Tensor<double>;
using namespace std::chrono_literals;

namespace {

ModelSpec small(std::uint64_t seed, int period = 1, int layers = 3) {
  ModelSpec m;
  m.n_layers = layers;
  m.d_model = 16;
  m.n_heads = 2;
  m.d_ff = 32;
  m.vocab = 12;
  m.max_steps = 24;
  m.fusion_period = period;
  m.adapter_rank = 0;
  m.seed = seed;
  return m;
}

Ensemble<double> chain(int n, int period = 1, std::uint64_t seed = 1) {
  EnsembleSpec s;
  for (int i = 0; i <= n; ++i) s.models.push_back(small(seed * 10 + static_cast<std::uint64_t>(i), period));
  s.lambdas.assign(static_cast<std::size_t>(n), 0.3);
  s.top_k = 2;
  return Ensemble<double>::from_spec(s);
}

}  // namespace

TEST(StatePool, PutThenGetIsBitIdentical) {
  StatePool<double> pool;
  const auto v = Vec::vector({0.1, 1.0 / 3.0, -7e-300});
  pool_put(pool, {0, 1, 2}, v);
  EXPECT_EQ(pool_get(pool, {0, 1, 2}, 10), v);
}

TEST(StatePool, DuplicatePutIsProtocolError) {
  StatePool<double> pool;
  pool_put(pool, {1, 0, 0}, Vec({2}));
  EXPECT_THROW(pool_put(pool, {1, 0, 0}, Vec({2})), ProtocolError);
}

TEST(StatePool, PreWrittenKeyReturnsImmediately) {
  StatePool<double> pool;
  pool_put(pool, {0, 0, 0}, Vec({4}, 2.0));
  const auto a = Clock::now();
  pool_get(pool, {0, 0, 0}, 5000);
  EXPECT_LT(micros_between(a, Clock::now()), 50'000.0);
}

TEST(StatePool, MissingKeyTimesOutNamingTheKey) {
  StatePool<double> pool;
  const auto a = Clock::now();
  try {
    pool_get(pool, {3, 2, 7}, 50);
    FAIL() << "expected a deadlock error";
  } catch (const DeadlockError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("model 3"), std::string::npos);
    EXPECT_NE(msg.find("layer 2"), std::string::npos);
    EXPECT_NE(msg.find("step 7"), std::string::npos);
  }
  EXPECT_GE(micros_between(a, Clock::now()), 50'000.0);
}

TEST(StatePool, DelayedProducer) {
  StatePool<double> pool;
  const auto a = Clock::now();
  std::thread producer([&] {
    std::this_thread::sleep_for(10ms);
    pool_put(pool, {0, 0, 0}, Vec::vector({5.0}));
  });
  const auto v = pool_get(pool, {0, 0, 0}, 5000);
  const double waited = micros_between(a, Clock::now());
  producer.join();
  EXPECT_EQ(v[0], 5.0);
  EXPECT_GE(waited, 10'000.0);
}

TEST(StatePool, StressInterleavedPutGet) {
  // 4 producers write 250 keys each; 4 consumers read a disjoint permutation.
  StatePool<double> pool;
  constexpr int kWorkers = 4, kPer = 250;
  std::atomic<int> received{0};
  std::atomic<long long> checksum{0};
  std::vector<std::thread> ts;
  for (int w = 0; w < kWorkers; ++w) {
    ts.emplace_back([&, w] {
      for (int j = 0; j < kPer; ++j) pool.put({w, j % 7, j}, Vec::vector({double(w * kPer + j)}));
    });
    ts.emplace_back([&, w] {
      const int src = (w + 1) % kWorkers;
      for (int j = kPer - 1; j >= 0; --j) {
        const auto v = pool.get({src, j % 7, j}, 5000ms);
        checksum += static_cast<long long>(v[0]);
        ++received;
      }
    });
  }
  for (auto& t : ts) t.join();
  EXPECT_EQ(received.load(), kWorkers * kPer);
  const long long total = kWorkers * kPer;
  EXPECT_EQ(checksum.load(), total * (total - 1) / 2);
  EXPECT_EQ(pool.puts(), static_cast<std::size_t>(total));
  EXPECT_EQ(pool.gets(), static_cast<std::size_t>(total));
}

TEST(StatePool, AbortWakesReaders) {
  StatePool<double> pool;
  std::thread t([&] {
    std::this_thread::sleep_for(5ms);
    pool.abort();
  });
  EXPECT_THROW(pool.get({0, 0, 0}, 5000ms), ProtocolError);
  t.join();
}

TEST(DecodeSequential, SingleModelIsGreedyBaseDecoding) {
  const auto ens = chain(0);
  const std::vector<int> prompt{3, 1, 4};
  const auto r = decode_sequential(ens, prompt, 6);
  // Oracle: rerun the whole prefix through the plain model each step.
  std::vector<int> seq = prompt;
  for (std::size_t k = 0; k < r.tokens.size(); ++k) {
    const auto tr = ens.models[0].forward_teacher(seq);
    const int want = static_cast<int>(argmax(tr.logits.back().span()));
    EXPECT_EQ(r.tokens[k], want);
    EXPECT_EQ(r.fused_logits[k], tr.logits.back());
    seq.push_back(want);
  }
}

TEST(DecodeSequential, MatchesTeacherForcedCompositionalOracle) {
  const auto ens = chain(1, 1, 4);
  const std::vector<int> prompt{2, 7, 7, 1};
  const auto r = decode_sequential(ens, prompt, 8);
  std::vector<int> seq = prompt;
  for (std::size_t k = 0; k < r.tokens.size(); ++k) {
    const auto fused = ens.fused_teacher_logits(seq);
    const int want = static_cast<int>(argmax(fused.back().span()));
    EXPECT_EQ(r.tokens[k], want) << "token " << k;
    for (std::size_t v = 0; v < fused.back().size(); ++v) EXPECT_NEAR(r.fused_logits[k][v], fused.back()[v], 1e-12);
    seq.push_back(want);
  }
}

TEST(DecodeSequential, Deterministic) {
  const auto a = decode_sequential(chain(2), {1, 2}, 10);
  const auto b = decode_sequential(chain(2), {1, 2}, 10);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.fused_logits, b.fused_logits);
}

TEST(DecodeSequential, StopsAtEos) {
  auto ens = chain(1);
  ens.models[0].weights().b_out[11] = 1e3;  // EOS = V-1
  const auto r = decode_sequential(ens, {1}, 10);
  ASSERT_EQ(r.tokens.size(), 1u);
  EXPECT_EQ(r.tokens[0], 11);
  EXPECT_EQ(decode_pipelined(ens, {1}, 10).tokens, r.tokens);
}

TEST(DecodeSequential, Errors) {
  const auto ens = chain(0);
  EXPECT_THROW(decode_sequential(ens, {}, 3), ContractError);
  EXPECT_THROW(decode_sequential(ens, std::vector<int>(20, 1), 6), RangeError);
  EXPECT_THROW(decode_pipelined(ens, std::vector<int>(20, 1), 6), RangeError);
  EXPECT_NO_THROW(decode_sequential(ens, std::vector<int>(20, 1), 5));
  EXPECT_TRUE(decode_sequential(ens, {1}, 0).tokens.empty());
}

TEST(DecodePipelined, EquivalenceGrid) {
  int cases = 0;
  for (int n = 0; n <= 2; ++n) {
    for (int period : {1, 2, 4}) {
      const auto ens = chain(n, period, static_cast<std::uint64_t>(n * 7 + period));
      for (const auto& prompt : std::vector<std::vector<int>>{{0}, {5, 3, 9}, {1, 1, 1, 1, 2}}) {
        const auto seq = decode_sequential(ens, prompt, 7);
        for (int workers = 1; workers <= n + 1; ++workers) {
          const auto pip = decode_pipelined(ens, prompt, 7, PipelineOptions{workers, 5000, true});
          EXPECT_EQ(pip.tokens, seq.tokens) << "n=" << n << " period=" << period << " workers=" << workers;
          ASSERT_EQ(pip.fused_logits.size(), seq.fused_logits.size());
          for (std::size_t k = 0; k < seq.fused_logits.size(); ++k) EXPECT_EQ(pip.fused_logits[k], seq.fused_logits[k]);
          ++cases;
        }
      }
    }
  }
  EXPECT_GE(cases, 20);
}

TEST(DecodePipelined, WavefrontPrecedence) {
  const auto ens = chain(2, 1, 3);
  const auto r = decode_pipelined(ens, {1, 2, 3}, 5);
  std::map<std::tuple<int, int, int>, LayerTiming> at;
  for (const auto& l : r.timing.layers) at[{l.model, l.layer, l.step}] = l;
  const int L = ens.models[0].n_layers();
  std::set<int> steps;
  for (const auto& l : r.timing.layers) steps.insert(l.step);
  EXPECT_EQ(steps.size(), 3u + 5u - 1u);
  for (int t : steps) {
    for (int i = 0; i < 3; ++i) {
      for (int l = 1; l <= L + 1; ++l) {
        const auto& me = at.at({i, l, t});
        EXPECT_GE(me.start_us, at.at({i, l - 1, t}).finish_us);
        if (i > 0 && l <= L) {
          EXPECT_GE(me.start_us, at.at({i - 1, l - 1, t}).finish_us);
        }
      }
      if (t > 0) {
        EXPECT_GE(at.at({i, 0, t}).start_us, at.at({i, L + 1, t - 1}).finish_us);
      }
    }
  }
}

TEST(DecodePipelined, ReportsStatePassingOverhead) {
  const auto ens = chain(1);
  const auto r = decode_pipelined(ens, {1, 2}, 4);
  EXPECT_GT(r.timing.states_passed, 0u);
  EXPECT_GT(r.timing.state_passing_us, 0.0);
  EXPECT_GT(r.timing.wall_us, 0.0);
  const auto j = r.timing.to_json();
  EXPECT_TRUE(j.contains("state_passing_us"));
  EXPECT_EQ(j["layers"].size(), r.timing.layers.size());
}

TEST(DecodePipelined, DeadlockAbortsWithPartialTrace) {
  const auto ens = chain(2);
  try {
    decode_pipelined(ens, {1, 2, 3}, 10, PipelineOptions{0, 0, true});
    // A zero timeout can still succeed if every read finds its key ready.
  } catch (const DecodeAborted& e) {
    EXPECT_LE(e.partial_tokens().size(), 10u);
    EXPECT_THROW(std::rethrow_exception(e.cause()), DeadlockError);
  }
}
