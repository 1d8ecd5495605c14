#include <gtest/gtest.h>

#include <filesystem>
#include <cstring>
#include <fstream>

#include "llmboost/checkpoint.hpp"
#include "llmboost/pipeline.hpp"

using namespace llmboost;

namespace {

ModelSpec tiny(std::uint64_t seed, int vocab = 12) {
  ModelSpec m;
  m.n_layers = 2;
  m.d_model = 8;
  m.n_heads = 2;
  m.d_ff = 16;
  m.vocab = vocab;
  m.max_steps = 16;
  m.fusion_period = 2;
  m.adapter_rank = 2;
  m.seed = seed;
  return m;
}

std::string fresh_dir(const std::string& name) {
  const auto d = std::filesystem::path(::testing::TempDir()) / name;
  std::filesystem::remove_all(d);
  return d.string();
}

template <typename T>
bool same_weights(const Model<T>& a, const Model<T>& b) {
  std::vector<T> fa, fb;
  visit_params(a.weights(), [&](const std::string&, const Tensor<T>& t, bool) { fa.insert(fa.end(), t.data().begin(), t.data().end()); });
  visit_params(b.weights(), [&](const std::string&, const Tensor<T>& t, bool) { fb.insert(fb.end(), t.data().begin(), t.data().end()); });
  return fa.size() == fb.size() && std::memcmp(fa.data(), fb.data(), fa.size() * sizeof(T)) == 0;
}

}  // namespace

TEST(Checkpoint, ModelRoundTripIsBitExact) {
  Model<double> m(tiny(3));
  // Awkward values: subnormal, long mantissa, negative zero.
  m.weights().b_out[0] = 4.9e-324;
  m.weights().b_out[1] = 0.1 + 0.2;
  m.weights().b_out[2] = -0.0;
  const auto path = fresh_dir("ckpt_model.json");
  save_model(m, path);
  const auto back = load_model<double>(path);
  EXPECT_EQ(back.spec(), m.spec());
  EXPECT_TRUE(same_weights(m, back));
  EXPECT_TRUE(std::signbit(back.weights().b_out[2]));
}

TEST(Checkpoint, FloatModelRoundTrip) {
  Model<float> m(tiny(4));
  const auto j = model_to_json(m);
  EXPECT_EQ(j["precision"], "f32");
  EXPECT_TRUE(same_weights(m, model_from_json<float>(j)));
}

TEST(Checkpoint, CarriesFormatVersion) {
  auto j = model_to_json(Model<double>(tiny(1)));
  EXPECT_EQ(j["format_version"], kCheckpointFormat);
  j["format_version"] = 99;
  EXPECT_THROW(model_from_json<double>(j), FormatError);
  j = model_to_json(Model<double>(tiny(1)));
  j["params"]["w_out"]["shape"] = {3, 3};
  EXPECT_THROW(model_from_json<double>(j), FormatError);
  j = model_to_json(Model<double>(tiny(1)));
  j["params"].erase("lnf_g");
  EXPECT_THROW(model_from_json<double>(j), FormatError);
}

TEST(Checkpoint, RefusesNonFinite) {
  Model<double> m(tiny(1));
  m.weights().b_out[0] = std::nan("");
  EXPECT_THROW(model_to_json(m), FormatError);
}

TEST(Checkpoint, EnsembleManifestContents) {
  EnsembleSpec s;
  s.models = {tiny(1), tiny(2)};
  s.lambdas = {0.3};
  s.top_k = 3;
  const auto ens = Ensemble<double>::from_spec(s);
  const auto dir = fresh_dir("ckpt_manifest");
  const auto path = save_ensemble(ens, dir);
  std::ifstream f(path);
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j["models"].size(), 2u);
  EXPECT_EQ(j["models"][1]["checkpoint"], "model_1.json");
  EXPECT_EQ(j["models"][1]["fusion_period"], 2);
  EXPECT_EQ(j["lambdas"][0], 0.3);
  EXPECT_EQ(j["top_k"], 3);
  const auto back = load_ensemble<double>(path);
  EXPECT_EQ(back.spec.top_k, 3);
  EXPECT_EQ(back.spec.lambdas, s.lambdas);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_TRUE(same_weights(ens.models[i], back.models[i]));
}

TEST(Checkpoint, SaveLoadReproducesDecodingBitIdentically) {
  EnsembleSpec s;
  s.models = {tiny(5), tiny(6), tiny(7)};
  s.lambdas = {0.3, 0.5};
  const auto ens = Ensemble<double>::from_spec(s);
  const auto back = load_ensemble<double>(save_ensemble(ens, fresh_dir("ckpt_decode")));
  for (const auto& prompt : std::vector<std::vector<int>>{{1}, {4, 2, 9}, {0, 0, 3, 3}}) {
    const auto a = decode_sequential(ens, prompt, 6);
    const auto b = decode_sequential(back, prompt, 6);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(a.fused_logits, b.fused_logits);
    EXPECT_EQ(decode_pipelined(back, prompt, 6).fused_logits, a.fused_logits);
  }
}

TEST(Checkpoint, VocabularyMismatchIsRefused) {
  const auto dir = fresh_dir("ckpt_vocab");
  std::filesystem::create_directories(dir);
  save_model(Model<double>(tiny(1, 12)), dir + "/a.json");
  save_model(Model<double>(tiny(2, 14)), dir + "/b.json");
  const nlohmann::json manifest = {{"kind", "llmboost.ensemble"},
                                   {"format_version", kCheckpointFormat},
                                   {"models", {{{"checkpoint", "a.json"}}, {{"checkpoint", "b.json"}}}},
                                   {"lambdas", {0.3}}};
  std::ofstream(dir + "/manifest.json") << manifest.dump();
  try {
    load_ensemble<double>(dir + "/manifest.json");
    FAIL() << "expected refusal";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("incompatible tokenizers"), std::string::npos);
  }
}

TEST(Checkpoint, MissingFiles) {
  EXPECT_THROW(load_model<double>("/nonexistent/m.json"), FormatError);
  EXPECT_THROW(load_ensemble<double>("/nonexistent/manifest.json"), FormatError);
  const auto dir = fresh_dir("ckpt_missing");
  std::filesystem::create_directories(dir);
  std::ofstream(dir + "/manifest.json") << R"({"kind":"llmboost.ensemble","format_version":1,"models":[{"checkpoint":"gone.json"}],"lambdas":[]})";
  EXPECT_THROW(load_ensemble<double>(dir + "/manifest.json"), FormatError);
}
