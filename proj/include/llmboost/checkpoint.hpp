#pragma once

// JSON checkpoints for single models and ensemble manifests.
//
// Values are written through nlohmann's shortest round-trip formatting, so
// doubles come back bit-identical. Non-finite weights are refused on save.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "llmboost/ensemble.hpp"
#include "llmboost/errors.hpp"
#include "llmboost/transformer.hpp"

namespace llmboost {

inline constexpr int kCheckpointFormat = 1;

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  return {{"n_layers", s.n_layers}, {"d_model", s.d_model},       {"n_heads", s.n_heads},
          {"d_ff", s.d_ff},         {"vocab", s.vocab},           {"max_steps", s.max_steps},
          {"fusion_period", s.fusion_period}, {"adapter_rank", s.adapter_rank}, {"seed", s.seed}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.n_layers = j.at("n_layers").get<int>();
  s.d_model = j.at("d_model").get<int>();
  s.n_heads = j.at("n_heads").get<int>();
  s.d_ff = j.at("d_ff").get<int>();
  s.vocab = j.at("vocab").get<int>();
  s.max_steps = j.at("max_steps").get<int>();
  s.fusion_period = j.at("fusion_period").get<int>();
  s.adapter_rank = j.at("adapter_rank").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  f << j.dump(1) << '\n';
}

inline void check_header(const nlohmann::json& j, const char* kind, const std::string& path) {
  if (!j.is_object() || j.value("kind", "") != kind) {
    throw FormatError(path + ": not a " + std::string(kind) + " file");
  }
  const int v = j.value("format_version", -1);
  if (v != kCheckpointFormat) {
    throw FormatError(path + ": unsupported format_version " + std::to_string(v) + " (expected " +
                      std::to_string(kCheckpointFormat) + ")");
  }
}

}  // namespace detail

template <typename T>
nlohmann::json model_to_json(const Model<T>& model) {
  nlohmann::json params = nlohmann::json::object();
  visit_params(model.weights(), [&](const std::string& name, const Tensor<T>& t, bool) {
    std::vector<double> vals(t.data().begin(), t.data().end());
    for (double v : vals) {
      if (!std::isfinite(v)) throw FormatError("refusing to save non-finite value in " + name);
    }
    params[name] = {{"shape", t.shape()}, {"data", vals}};
  });
  return {{"kind", "llmboost.model"},
          {"format_version", kCheckpointFormat},
          {"precision", sizeof(T) == sizeof(double) ? "f64" : "f32"},
          {"spec", spec_to_json(model.spec())},
          {"params", params}};
}

template <typename T>
Model<T> model_from_json(const nlohmann::json& j, const std::string& where = "checkpoint") {
  detail::check_header(j, "llmboost.model", where);
  try {
    const ModelSpec spec = spec_from_json(j.at("spec"));
    Model<T> model(spec);  // fresh init fixes the expected shapes
    const auto& params = j.at("params");
    std::size_t seen = 0;
    visit_params(model.weights(), [&](const std::string& name, Tensor<T>& t, bool) {
      if (!params.contains(name)) throw FormatError(where + ": missing parameter " + name);
      const auto& p = params.at(name);
      const auto shape = p.at("shape").get<std::vector<std::size_t>>();
      if (shape != t.shape()) {
        throw FormatError(where + ": parameter " + name + " has shape " + p.at("shape").dump() +
                          ", spec expects " + t.shape_string());
      }
      const auto vals = p.at("data").get<std::vector<double>>();
      if (vals.size() != t.size()) throw FormatError(where + ": parameter " + name + " has wrong length");
      for (std::size_t i = 0; i < vals.size(); ++i) t[i] = static_cast<T>(vals[i]);
      ++seen;
    });
    if (seen != params.size()) throw FormatError(where + ": unexpected extra parameters");
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  } catch (const ContractError& e) {
    throw FormatError(where + ": " + e.what());
  }
}

template <typename T>
void save_model(const Model<T>& model, const std::string& path) {
  detail::write_json_file(model_to_json(model), path);
}

template <typename T>
Model<T> load_model(const std::string& path) {
  return model_from_json<T>(detail::read_json_file(path), path);
}

/// Writes model_<i>.json per member plus manifest.json into dir. Returns the
/// manifest path.
template <typename T>
std::string save_ensemble(const Ensemble<T>& ens, const std::string& dir) {
  ens.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json members = nlohmann::json::array();
  for (std::size_t i = 0; i < ens.size(); ++i) {
    const std::string file = "model_" + std::to_string(i) + ".json";
    save_model(ens.models[i], (std::filesystem::path(dir) / file).string());
    members.push_back({{"checkpoint", file}, {"fusion_period", ens.models[i].spec().fusion_period}});
  }
  const nlohmann::json manifest = {{"kind", "llmboost.ensemble"},
                                   {"format_version", kCheckpointFormat},
                                   {"models", members},
                                   {"lambdas", ens.spec.lambdas},
                                   {"top_k", ens.spec.top_k},
                                   {"fusion_enabled", ens.spec.fusion_enabled}};
  const auto path = (std::filesystem::path(dir) / "manifest.json").string();
  detail::write_json_file(manifest, path);
  return path;
}

/// Checkpoint paths are resolved relative to the manifest. Vocabulary
/// mismatches are refused before any weights are used.
template <typename T>
Ensemble<T> load_ensemble(const std::string& manifest_path) {
  const auto j = detail::read_json_file(manifest_path);
  detail::check_header(j, "llmboost.ensemble", manifest_path);
  const auto base = std::filesystem::path(manifest_path).parent_path();
  Ensemble<T> ens;
  try {
    for (const auto& m : j.at("models")) {
      auto p = std::filesystem::path(m.at("checkpoint").get<std::string>());
      if (p.is_relative()) p = base / p;
      ens.models.push_back(load_model<T>(p.string()));
      ens.spec.models.push_back(ens.models.back().spec());
      if (m.contains("fusion_period") && m.at("fusion_period").get<int>() != ens.models.back().spec().fusion_period) {
        throw FormatError(manifest_path + ": fusion_period for " + p.string() + " disagrees with the checkpoint");
      }
    }
    ens.spec.lambdas = j.at("lambdas").get<std::vector<double>>();
    ens.spec.top_k = j.value("top_k", 2);
    ens.spec.fusion_enabled = j.value("fusion_enabled", true);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path + ": " + e.what());
  }
  ens.validate();
  return ens;
}

}  // namespace llmboost
