#pragma once

// Run configuration shared by the train/infer/bench commands. Read from a
// JSON file, then overridden field by field from the command line.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "llmboost/checkpoint.hpp"
#include "llmboost/errors.hpp"
#include "llmboost/tasks.hpp"
#include "llmboost/training.hpp"
#include "llmboost/verify.hpp"

namespace llmboost {

struct RunConfig {
  TaskSpec task;
  std::string data_path;  // corpus instead of a generated task
  std::string test_path;
  int test_count = 128;
  ModelSpec model;
  TrainConfig train;
  int members = 2;  // base model plus successors
  double lambda = 0.3;
  int top_k = 2;
  std::vector<std::uint64_t> seeds{1, 2, 3};

  static RunConfig defaults() {
    const auto s = default_chain_setup(TaskKind::Copy, 1);
    RunConfig c;
    c.task = s.task;
    c.test_count = s.test_count;
    c.model = s.model;
    c.train = s.train;
    return c;
  }

  void validate() const {
    task.validate();
    model.validate();
    train.validate();
    if (members < 1) throw ContractError("config: members must be >= 1");
    if (seeds.empty()) throw ContractError("config: seeds must be nonempty");
    if (!(lambda > 0)) throw ContractError("config: lambda must be positive");
    if (top_k < 1) throw ContractError("config: top_k must be >= 1");
    if (test_count < 1) throw ContractError("config: test_count must be >= 1");
    for (const auto* p : {&data_path, &test_path}) {
      if (!p->empty() && !std::ifstream(*p)) throw ContractError("config: cannot open " + *p);
    }
    if (data_path.empty() && task.vocab != model.vocab) {
      throw ContractError("config: task vocab " + std::to_string(task.vocab) + " differs from model vocab " +
                          std::to_string(model.vocab));
    }
    if (data_path.empty() && task.max_sequence_length() > model.max_steps) {
      throw ContractError("config: task sequences (up to " + std::to_string(task.max_sequence_length()) +
                          " tokens) exceed model max_steps " + std::to_string(model.max_steps));
    }
  }

  EnsembleSpec ensemble_spec(std::uint64_t seed) const {
    EnsembleSpec es;
    for (int i = 0; i < members; ++i) {
      ModelSpec m = model;
      m.seed = seed * 10 + static_cast<std::uint64_t>(i);
      es.models.push_back(m);
    }
    es.lambdas.assign(static_cast<std::size_t>(members - 1), lambda);
    es.top_k = top_k;
    return es;
  }

  nlohmann::json to_json() const {
    return {{"task",
             {{"kind", task_name(task.kind)},
              {"min_len", task.min_len},
              {"max_len", task.max_len},
              {"vocab", task.vocab},
              {"count", task.count},
              {"modulus", task.modulus},
              {"test_count", test_count}}},
            {"data", data_path},
            {"test", test_path},
            {"model", spec_to_json(model)},
            {"train",
             {{"alpha", train.alpha},
              {"beta", train.beta},
              {"learning_rate", train.learning_rate},
              {"epochs", train.epochs},
              {"batch_size", train.batch_size},
              {"alignment_samples", train.alignment_samples}}},
            {"ensemble", {{"members", members}, {"lambda", lambda}, {"top_k", top_k}}},
            {"seeds", seeds}};
  }

  /// Applies whichever fields are present; unknown keys are refused so a
  /// typo does not silently fall back to a default.
  void apply_json(const nlohmann::json& j) {
    auto known = [](const nlohmann::json& obj, std::initializer_list<const char*> keys, const std::string& where) {
      if (!obj.is_object()) throw FormatError("config: '" + where + "' must be an object");
      for (const auto& [k, v] : obj.items()) {
        bool ok = false;
        for (const char* key : keys) ok = ok || k == key;
        if (!ok) throw FormatError("config: unknown key '" + where + "." + k + "'");
      }
    };
    try {
      known(j, {"task", "data", "test", "model", "train", "ensemble", "seeds"}, "");
      if (j.contains("task")) {
        const auto& t = j["task"];
        known(t, {"kind", "min_len", "max_len", "vocab", "count", "modulus", "test_count"}, "task");
        if (t.contains("kind")) task.kind = parse_task(t["kind"].get<std::string>());
        task.min_len = t.value("min_len", task.min_len);
        task.max_len = t.value("max_len", task.max_len);
        task.vocab = t.value("vocab", task.vocab);
        task.count = t.value("count", task.count);
        task.modulus = t.value("modulus", task.modulus);
        test_count = t.value("test_count", test_count);
      }
      data_path = j.value("data", data_path);
      test_path = j.value("test", test_path);
      if (j.contains("model")) {
        auto merged = spec_to_json(model);
        known(j["model"], {"n_layers", "d_model", "n_heads", "d_ff", "vocab", "max_steps", "fusion_period",
                           "adapter_rank", "seed"}, "model");
        merged.update(j["model"]);
        model = spec_from_json(merged);
      }
      if (j.contains("train")) {
        const auto& t = j["train"];
        known(t, {"alpha", "beta", "learning_rate", "epochs", "batch_size", "alignment_samples"}, "train");
        train.alpha = t.value("alpha", train.alpha);
        train.beta = t.value("beta", train.beta);
        train.learning_rate = t.value("learning_rate", train.learning_rate);
        train.epochs = t.value("epochs", train.epochs);
        train.batch_size = t.value("batch_size", train.batch_size);
        train.alignment_samples = t.value("alignment_samples", train.alignment_samples);
      }
      if (j.contains("ensemble")) {
        const auto& e = j["ensemble"];
        known(e, {"members", "lambda", "top_k"}, "ensemble");
        members = e.value("members", members);
        lambda = e.value("lambda", lambda);
        top_k = e.value("top_k", top_k);
      }
      if (j.contains("seeds")) seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("config: ") + e.what());
    }
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot read config " + path);
    RunConfig c = defaults();
    try {
      c.apply_json(nlohmann::json::parse(f));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path + ": " + e.what());
    }
    return c;
  }
};

}  // namespace llmboost
