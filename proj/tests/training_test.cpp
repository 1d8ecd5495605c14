#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "llmboost/training.hpp"

using namespace llmboost;
using Vec = Tensor<double>;

namespace {

// Independent scalar oracle for the single-step objective written directly
// in log-sum-exp form.
double oracle_step_loss(const Vec& z, int gold, std::optional<int> err, double alpha, double beta) {
  long double mx = z[0];
  for (double v : z.data()) mx = std::max<long double>(mx, v);
  long double s = 0;
  for (double v : z.data()) s += std::exp(static_cast<long double>(v) - mx);
  const long double lse = mx + std::log(s);
  long double loss = alpha * (lse - z[static_cast<std::size_t>(gold)]);
  if (err) {
    const long double u = beta * (static_cast<long double>(z[static_cast<std::size_t>(gold)]) - z[static_cast<std::size_t>(*err)]);
    loss += std::log1p(std::exp(-u));
  }
  return static_cast<double>(loss);
}

ModelSpec tiny_spec(std::uint64_t seed, int rank = 0) {
  ModelSpec m;
  m.n_layers = 2;
  m.d_model = 8;
  m.n_heads = 2;
  m.d_ff = 8;
  m.vocab = 10;
  m.max_steps = 16;
  m.fusion_period = 1;
  m.adapter_rank = rank;
  m.seed = seed;
  return m;
}

}  // namespace

TEST(SuppressionLoss, AbsentErrorIsZero) {
  EXPECT_EQ(suppression_loss(Vec::vector({0.2, 0.8}), 1, std::nullopt, 0.1).value, 0.0);
}

TEST(SuppressionLoss, SymmetricCaseIsLn2) {
  EXPECT_NEAR(suppression_loss(Vec::vector({0.4, 0.4, 0.2}), 0, 1, 0.1).value, std::log(2.0), 1e-15);
}

TEST(SuppressionLoss, ScalarOracle) {
  const double got = suppression_loss(Vec::vector({0.8, 0.1, 0.1}), 0, 1, 0.1).value;
  const long double u = 0.1L * std::log(8.0L);
  const long double want = std::log1p(std::exp(-u));
  EXPECT_NEAR(got, static_cast<double>(want), 1e-15);
}

TEST(SuppressionLoss, ZeroProbabilityIsFlooredAndFlagged) {
  const auto r = suppression_loss(Vec::vector({0.0, 1.0}), 0, 1, 0.1);
  EXPECT_TRUE(r.floored);
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_FALSE(suppression_loss(Vec::vector({0.5, 0.5}), 0, 1, 0.1).floored);
}

TEST(SuppressionLoss, ContractErrors) {
  EXPECT_THROW(suppression_loss(Vec::vector({0.5, 0.5}), 1, 1, 0.1), ContractError);
  EXPECT_THROW(suppression_loss(Vec::vector({0.5, 0.5}), 2, std::nullopt, 0.1), RangeError);
}

TEST(TotalLoss, NoErrorsUnitAlphaIsCrossEntropy) {
  std::mt19937_64 rng(1);
  std::vector<Vec> z;
  for (int t = 0; t < 4; ++t) z.push_back(random_normal<double>({5}, rng, 1.0));
  const std::vector<int> gold{1, kNoLabel, 4, 0};
  const ErrorTokenTrace none(4);
  double ce = 0;
  for (int t : {0, 2, 3}) ce += -std::log(softmax(z[static_cast<std::size_t>(t)])[static_cast<std::size_t>(gold[static_cast<std::size_t>(t)])]);
  EXPECT_NEAR(total_loss(z, gold, none, 1.0, 0.1).value, ce, 1e-12);
}

TEST(TotalLoss, SingleStepAdditivity) {
  const auto z = Vec::vector({0.3, -1.0, 2.0});
  const auto p = softmax(z);
  const double want = suppression_loss(p, 0, 2, 0.1).value + 0.9 * cross_entropy(p, 0).value;
  EXPECT_NEAR(total_loss<double>({z}, {0}, {2}, 0.9, 0.1).value, want, 1e-15);
}

TEST(TotalLoss, LengthFiveMatchesOracle) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> tok(0, 6);
  std::vector<Vec> z;
  std::vector<int> gold;
  ErrorTokenTrace errs;
  double want = 0;
  for (int t = 0; t < 5; ++t) {
    z.push_back(random_normal<double>({7}, rng, 2.0));
    gold.push_back(tok(rng));
    std::optional<int> e;
    if (t % 2 == 0) e = (gold.back() + 1 + t) % 7;
    errs.push_back(e);
    want += oracle_step_loss(z.back(), gold.back(), e, 0.9, 0.1);
  }
  EXPECT_NEAR(total_loss(z, gold, errs, 0.9, 0.1).value, want, 1e-12);
}

TEST(TotalLossProperty, SuppressionLocality) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vec> z;
    std::vector<int> gold;
    for (int t = 0; t < 6; ++t) {
      z.push_back(random_normal<double>({6}, rng, 2.0));
      gold.push_back(t % 6);
    }
    const ErrorTokenTrace none(6);
    const double alpha = 0.1 + 0.15 * (trial % 6);
    const double ce = total_loss(z, gold, none, 1.0, 0.1).value;
    EXPECT_EQ(total_loss(z, gold, none, alpha, 0.1).value, alpha * ce);
  }
}

TEST(LossLogitGrad, NoErrorIsScaledPMinusY) {
  const auto p = Vec::vector({0.2, 0.5, 0.3});
  const auto g = loss_logit_grad(p, 1, std::nullopt, 0.9, 0.1);
  const double want[] = {0.18, -0.45, 0.27};
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], want[i], 1e-15);
}

TEST(LossLogitGrad, ConfidentGoldSilencesSuppression) {
  const auto p = Vec::vector({1.0 - 1e-280, 1e-280});
  const auto g = loss_logit_grad(p, 0, 1, 0.9, 10.0);
  const auto ce_only = loss_logit_grad(p, 0, std::nullopt, 0.9, 10.0);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(g[i], ce_only[i], 1e-12);
}

TEST(LossLogitGradProperty, ThousandDrawsMatchFiniteDifferences) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> vdist(2, 12);
  std::uniform_real_distribution<double> a(0.05, 2.0), b(0.01, 2.0), sd(0.3, 3.0);
  std::bernoulli_distribution has_err(0.8);
  double worst = 0;
  for (int draw = 0; draw < 1000; ++draw) {
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
    const auto fd = finite_diff_grad<double>([&](const Vec& x) { return oracle_step_loss(x, gold, err, alpha, beta); },
                                             z, 1e-5);
    double diff = 0, norm = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      diff = std::max(diff, std::abs(g[i] - fd[i]));
      norm = std::max(norm, std::abs(fd[i]));
    }
    worst = std::max(worst, diff / std::max(norm, 1e-8));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(SgdStep, Examples) {
  const auto p = Vec::vector({1.0, -2.0});
  EXPECT_EQ(sgd_step(p, Vec::vector({3.0, 4.0}), 0.0), p);
  EXPECT_EQ(sgd_step(p, Vec({2}), 0.7), p);
  EXPECT_NEAR(sgd_step(Vec::vector({1.0}), Vec::vector({2.0}), 0.1)[0], 0.8, 1e-15);
  EXPECT_THROW(sgd_step(p, Vec({3}), 0.1), ShapeError);
}

TEST(SgdStep, OnlyTrainableSubsetMoves) {
  Model<double> m(tiny_spec(3, 2));
  const Weights<double> before = m.weights();
  Weights<double> g = zeros_like(before);
  visit_params(g, [](const std::string&, Tensor<double>& t, bool) { t.fill(1.0); });
  sgd_step(m, g, 0.01);
  std::vector<const Tensor<double>*> old;
  visit_params(before, [&](const std::string&, const Tensor<double>& t, bool) { old.push_back(&t); });
  std::size_t i = 0;
  visit_params(m.weights(), [&](const std::string& name, const Tensor<double>& t, bool adapter) {
    if (adapter) {
      EXPECT_NE(t, *old[i]) << name;
    } else {
      EXPECT_EQ(t, *old[i]) << name;
    }
    ++i;
  });
}

TEST(SequenceLossGrad, MatchesFiniteDifferencesThroughModel) {
  // Gradient of alpha*CE + Ls through a fused model w.r.t. every trainable weight.
  Ensemble<double> ens = Ensemble<double>::from_spec(EnsembleSpec{{tiny_spec(1), tiny_spec(2)}, {0.3}, 2, true});
  Dataset data{Example{{1, 2, 3, 8, 1, 2}, {kNoLabel, kNoLabel, kNoLabel, 1, 2, 3}}};
  const auto samples = prepare_samples(ens, 1, data);
  ASSERT_FALSE(samples[0].fusion.empty());
  ChainSample<double> s = samples[0];
  s.errors = {std::nullopt, std::nullopt, std::nullopt, 4, std::nullopt, 7};
  const LossWeights lw{0.9, 1.0, 0.5};
  Model<double>& model = ens.models[1];
  Weights<double> g = zeros_like(model.weights());
  sequence_loss_grad(model, s, lw, &g);
  const auto analytic = flatten_trainable(model, g);
  const auto x0 = flatten_trainable(model, model.weights());

  auto f = [&](const Vec& x) {
    Model<double> probe = model;
    Weights<double> w = probe.weights();
    assign_trainable<double>(probe.spec(), w, x.span());
    Model<double> m2(probe.spec(), w);
    const auto l = sequence_loss_grad<double>(m2, s, lw, nullptr);
    return 0.9 * l.ce + l.supp;
  };
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pick(0, x0.size() - 1);
  Vec x = Vec::vector(x0);
  for (int k = 0; k < 40; ++k) {
    const std::size_t i = pick(rng);
    const double h = 1e-5;
    Vec up = x, dn = x;
    up[i] += h;
    dn[i] -= h;
    const double fd = (f(up) - f(dn)) / (2 * h);
    EXPECT_NEAR(analytic[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "coordinate " << i;
  }
}

TEST(Alignment, ZeroSuppressionGradient) {
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs{{{0, 0, 0}, {1, 2, 3}}};
  const auto e = alignment_from_pairs(pairs);
  EXPECT_EQ(e.rho, 0.0);
  EXPECT_EQ(e.gamma, 0.0);
  EXPECT_EQ(e.sample_count, 1);
}

TEST(Alignment, IdenticalGradients) {
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs{{{1, -2, 3}, {1, -2, 3}}, {{0.5, 0.5}, {0.5, 0.5}}};
  const auto e = alignment_from_pairs(pairs);
  EXPECT_EQ(e.rho, 0.0);
  EXPECT_DOUBLE_EQ(e.gamma, 1.0);
}

TEST(Alignment, OpposedGradientsClampBelowOne) {
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs{{{-1, 0}, {2, 0}}};
  const auto e = alignment_from_pairs(pairs);
  EXPECT_LT(e.rho, 1.0);
  EXPECT_GT(e.rho, 0.999);
  EXPECT_DOUBLE_EQ(e.gamma, 0.5);
}

TEST(Alignment, RequiresActiveErrors) {
  Model<double> m(tiny_spec(1));
  Example ex{{1, 2}, {2, 3}};
  ChainSample<double> s;
  s.example = &ex;
  s.errors = {std::nullopt, std::nullopt};
  EXPECT_THROW(estimate_alignment<double>(m, {&s}, TrainConfig{}), ContractError);
}

TEST(Alignment, RealBatchIsBounded) {
  Model<double> m(tiny_spec(1));
  Example ex{{1, 2, 3, 4}, {2, 3, 4, 5}};
  ChainSample<double> s;
  s.example = &ex;
  s.errors = {7, std::nullopt, 1, 0};
  const auto e = estimate_alignment<double>(m, {&s}, TrainConfig{});
  EXPECT_GE(e.rho, 0.0);
  EXPECT_LT(e.rho, 1.0);
  EXPECT_TRUE(std::isfinite(e.gamma));
  EXPECT_GT(e.gamma, 0.0);
}

TEST(DescentLrBound, Examples) {
  EXPECT_DOUBLE_EQ(descent_lr_bound(1.0, 0.0, 0.0, 2.0), 1.0);
  EXPECT_NEAR(descent_lr_bound(0.9, 0.5, 1.0, 4.0), 0.8 / (4.0 * 3.61), 1e-15);
  EXPECT_NEAR(descent_lr_bound(0.9, 0.5, 1.0, 4.0), 0.0554, 5e-5);
  EXPECT_LT(descent_lr_bound(0.5 + 1e-12, 0.5, 1.0, 1.0), 1e-11);
}

TEST(DescentLrBound, PreconditionViolation) {
  EXPECT_THROW(descent_lr_bound(0.5, 0.5, 1.0, 1.0), BoundViolated);
  EXPECT_THROW(descent_lr_bound(0.9, 0.0, 0.0, 0.0), ContractError);
}

namespace {
Dataset copy_data(int count, int vocab) {
  TaskSpec t;
  t.kind = TaskKind::Copy;
  t.min_len = 2;
  t.max_len = 3;
  t.vocab = vocab;
  t.count = count;
  return gen_dataset(t);
}
}  // namespace

TEST(TrainChain, FrozenPredecessorsAreBitIdentical) {
  auto s0 = tiny_spec(1), s1 = tiny_spec(2), s2 = tiny_spec(3, 2);
  Ensemble<double> ens = Ensemble<double>::from_spec(EnsembleSpec{{s0, s1, s2}, {0.3, 0.3}, 2, true});
  const auto data = copy_data(8, 10);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.alignment_samples = 2;
  // Train the base model, then snapshot it and run stage 2 for the successors
  // by hand to observe the frozen weights around each call.
  auto samples0 = prepare_samples(ens, 0, data);
  train_model(ens.models[0], samples0, cfg, 1, 0);
  for (std::size_t i = 1; i < ens.size(); ++i) {
    std::vector<Weights<double>> frozen;
    for (std::size_t j = 0; j < i; ++j) frozen.push_back(ens.models[j].weights());
    const auto samples = prepare_samples(ens, i, data);
    train_model(ens.models[i], samples, cfg, 2, static_cast<int>(i));
    for (std::size_t j = 0; j < i; ++j) {
      std::size_t k = 0;
      std::vector<const Tensor<double>*> now;
      visit_params(ens.models[j].weights(), [&](const std::string&, const Tensor<double>& t, bool) { now.push_back(&t); });
      visit_params(frozen[j], [&](const std::string& name, const Tensor<double>& t, bool) {
        EXPECT_EQ(t, *now[k++]) << "model " << j << " " << name;
      });
    }
  }
}

TEST(TrainChain, SingleModelIsPlainCrossEntropy) {
  Ensemble<double> ens = Ensemble<double>::from_spec(EnsembleSpec{{tiny_spec(1)}, {}, 2, true});
  const auto data = copy_data(8, 10);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  const auto r = train_chain(ens, data, cfg);
  ASSERT_EQ(r.metrics.size(), 3u);
  for (const auto& m : r.metrics) {
    EXPECT_EQ(m.stage, 1);
    EXPECT_EQ(m.supp, 0.0);
    EXPECT_FALSE(m.rho.has_value());
  }
  // Same updates by hand: full batch, CE only, same shuffled order.
  Model<double> ref(tiny_spec(1));
  std::vector<ChainSample<double>> samples(data.size());
  for (std::size_t k = 0; k < data.size(); ++k) samples[k].example = &data[k];
  train_model(ref, samples, cfg, 1, 0);
  std::vector<const Tensor<double>*> a;
  visit_params(r.ensemble.models[0].weights(), [&](const std::string&, const Tensor<double>& t, bool) { a.push_back(&t); });
  std::size_t k = 0;
  visit_params(ref.weights(), [&](const std::string&, const Tensor<double>& t, bool) { EXPECT_EQ(t, *a[k++]); });
}

TEST(TrainChain, PerfectPredecessorSilencesSuppression) {
  // A predecessor with no errors produces empty error traces; stage 2 is CE only.
  Ensemble<double> ens = Ensemble<double>::from_spec(EnsembleSpec{{tiny_spec(1), tiny_spec(2)}, {0.3}, 2, true});
  const auto data = copy_data(4, 10);
  auto samples = prepare_samples(ens, 1, data);
  for (auto& s : samples) s.errors.assign(s.example->input.size(), std::nullopt);
  TrainConfig cfg;
  cfg.epochs = 1;
  const auto m = train_model(ens.models[1], samples, cfg, 2, 1);
  EXPECT_EQ(m[0].supp, 0.0);
  EXPECT_EQ(m[0].active_errors, 0u);
}

TEST(TrainChain, RejectsBadDatasets) {
  Ensemble<double> ens = Ensemble<double>::from_spec(EnsembleSpec{{tiny_spec(1)}, {}, 2, true});
  TrainConfig cfg;
  EXPECT_THROW(train_chain(ens, Dataset{}, cfg), ContractError);
  EXPECT_THROW(train_chain(ens, Dataset{Example{std::vector<int>(17, 1), std::vector<int>(17, 1)}}, cfg), RangeError);
  EXPECT_THROW(train_chain(ens, Dataset{Example{{1, 99}, {1, 1}}}, cfg), RangeError);
}

TEST(TrainChain, DivergenceIsReported) {
  Ensemble<double> ens = Ensemble<double>::from_spec(EnsembleSpec{{tiny_spec(1)}, {}, 2, true});
  TrainConfig cfg;
  cfg.learning_rate = 1e300;
  cfg.epochs = 3;
  EXPECT_THROW(train_chain(ens, copy_data(8, 10), cfg), TrainingError);
}

TEST(TrainChain, MetricsRecordIsStructured) {
  EpochMetrics m;
  m.stage = 2;
  m.rho = 0.25;
  const auto j = m.to_json();
  EXPECT_EQ(j["stage"], 2);
  EXPECT_EQ(j["rho"], 0.25);
  EXPECT_TRUE(j["gamma"].is_null());
}
