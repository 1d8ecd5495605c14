#pragma once

// Chain wiring for a boosted ensemble: hidden-state fusion, error tokens, and
// top-k key-logits fusion.

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "llmboost/errors.hpp"
#include "llmboost/numkit.hpp"
#include "llmboost/transformer.hpp"

namespace llmboost {

struct EnsembleSpec {
  std::vector<ModelSpec> models;  // index 0 is the base model
  std::vector<double> lambdas;    // one per successor
  int top_k = 2;
  bool fusion_enabled = true;

  std::size_t n_successors() const { return models.empty() ? 0 : models.size() - 1; }

  void validate() const {
    if (models.empty()) throw ContractError("EnsembleSpec: at least one model required");
    for (const auto& m : models) {
      m.validate();
      if (m.vocab != models.front().vocab) {
        throw ContractError(
            "vocabulary mismatch between ensemble members (" + std::to_string(models.front().vocab) +
            " vs " + std::to_string(m.vocab) +
            "): models with incompatible tokenizers cannot perform layer-wise residual correction");
      }
      if (m.max_steps != models.front().max_steps) {
        throw ContractError("EnsembleSpec: all members must share max_steps");
      }
      if (m.d_model != models.front().d_model) {
        throw ContractError("EnsembleSpec: hidden-state fusion requires equal d_model");
      }
    }
    if (lambdas.size() != n_successors()) {
      throw ContractError("EnsembleSpec: expected " + std::to_string(n_successors()) +
                          " lambdas, got " + std::to_string(lambdas.size()));
    }
    for (double l : lambdas)
      if (!(l > 0)) throw ContractError("EnsembleSpec: lambdas must be positive");
    if (top_k < 1 || top_k > models.front().vocab) {
      throw ContractError("EnsembleSpec: top_k must be in [1, V]");
    }
  }
};

/// Per-step wrong-token ids; present only where the predecessor's argmax
/// disagreed with a gold label.
using ErrorTokenTrace = std::vector<std::optional<int>>;

/// Supervision mask value for positions without a gold label.
inline constexpr int kNoLabel = -1;

template <typename T>
Tensor<T> fuse_hidden(const Tensor<T>& h_own, const Tensor<T>& h_pred, int layer, int period) {
  if (h_own.rank() != 1 || h_own.size() != h_pred.size() || h_pred.rank() != 1) {
    throw ShapeError("fuse_hidden: dimension mismatch " + h_own.shape_string() + " vs " +
                     h_pred.shape_string());
  }
  if (period < 1) throw ContractError("fuse_hidden: period must be positive");
  if (layer % period != 0) return h_own;
  Tensor<T> s = h_own;
  for (std::size_t i = 0; i < s.size(); ++i) s[i] += h_pred[i];
  return layer_norm(s, Model<T>::kNormEps);
}

/// Error tokens: the predecessor's wrong argmax at labelled positions. Positions whose gold is kNoLabel never carry one.
template <typename T>
ErrorTokenTrace error_tokens(const std::vector<Tensor<T>>& logits, const std::vector<int>& gold) {
  if (logits.size() != gold.size()) {
    throw ShapeError("error_tokens: " + std::to_string(logits.size()) + " logit steps vs " +
                     std::to_string(gold.size()) + " gold labels");
  }
  ErrorTokenTrace out(gold.size());
  for (std::size_t t = 0; t < gold.size(); ++t) {
    if (gold[t] == kNoLabel) continue;
    const int pred = static_cast<int>(argmax(logits[t].span()));
    if (pred != gold[t]) out[t] = pred;
  }
  return out;
}

/// Keeps the k largest entries in place (lowest index wins ties), zeros the rest.
template <typename T>
Tensor<T> topk_mask(const Tensor<T>& z, int k) {
  if (z.rank() != 1) throw ShapeError("topk_mask: expected a 1-D tensor");
  if (k < 1 || static_cast<std::size_t>(k) > z.size()) {
    throw RangeError("topk_mask: k=" + std::to_string(k) + " outside [1, " +
                     std::to_string(z.size()) + "]");
  }
  std::vector<std::size_t> idx(z.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
  Tensor<T> out(z.shape(), T(0));
  for (int i = 0; i < k; ++i) out[idx[static_cast<std::size_t>(i)]] = z[idx[static_cast<std::size_t>(i)]];
  return out;
}

/// z0 + sum_i lambda_i * topk_mask(z_i, k).
template <typename T>
Tensor<T> fuse_logits(const std::vector<Tensor<T>>& z, const std::vector<double>& lambdas, int k) {
  if (z.empty()) throw ContractError("fuse_logits: need at least the base logits");
  if (lambdas.size() != z.size() - 1) {
    throw ContractError("fuse_logits: " + std::to_string(z.size() - 1) + " successors but " +
                        std::to_string(lambdas.size()) + " lambdas");
  }
  Tensor<T> out = z.front();
  for (std::size_t i = 1; i < z.size(); ++i) {
    if (z[i].shape() != out.shape()) throw ShapeError("fuse_logits: logit shapes differ");
    const Tensor<T> m = topk_mask(z[i], k);
    const T lam = static_cast<T>(lambdas[i - 1]);
    for (std::size_t v = 0; v < out.size(); ++v) out[v] += lam * m[v];
  }
  return out;
}

/// For each step, maps every fusion layer l of the successor to the
/// predecessor's layer-(l-1) state (layer 0 = embedding output).
template <typename T>
std::vector<FusionInputs<T>> build_fusion_inputs(const LayerTrace<T>& pred, int period, int n_layers) {
  if (period < 1) throw ContractError("build_fusion_inputs: period must be positive");
  std::vector<FusionInputs<T>> out(pred.states.size());
  for (std::size_t t = 0; t < pred.states.size(); ++t) {
    for (int l = period; l <= n_layers; l += period) {
      const std::size_t src = static_cast<std::size_t>(l - 1);
      if (src >= pred.states[t].size()) {
        throw ContractError("build_fusion_inputs: predecessor trace lacks layer " +
                            std::to_string(src) + " at step " + std::to_string(t));
      }
      out[t].emplace(l, pred.states[t][src]);
    }
  }
  return out;
}

/// An ordered chain of models sharing a vocabulary.
template <typename T>
struct Ensemble {
  EnsembleSpec spec;
  std::vector<Model<T>> models;

  std::size_t size() const { return models.size(); }

  void validate() const {
    spec.validate();
    if (models.size() != spec.models.size()) throw ContractError("Ensemble: model count mismatch");
    for (std::size_t i = 0; i < models.size(); ++i) {
      if (!(models[i].spec() == spec.models[i])) {
        throw ContractError("Ensemble: model " + std::to_string(i) + " does not match its spec");
      }
    }
  }

  static Ensemble from_spec(const EnsembleSpec& s) {
    s.validate();
    Ensemble e;
    e.spec = s;
    for (const auto& m : s.models) e.models.emplace_back(m);
    return e;
  }

  /// Whether model i receives predecessor states at all.
  bool fuses(std::size_t i) const { return i > 0 && spec.fusion_enabled; }

  /// Teacher-forced traces of every member, each successor fed by its predecessor.
  std::vector<LayerTrace<T>> teacher_traces(const std::vector<int>& tokens) const {
    std::vector<LayerTrace<T>> traces;
    for (std::size_t i = 0; i < models.size(); ++i) {
      if (fuses(i)) {
        const auto fin = build_fusion_inputs(traces.back(), models[i].spec().fusion_period,
                                             models[i].spec().n_layers);
        traces.push_back(models[i].forward_teacher(tokens, &fin));
      } else {
        traces.push_back(models[i].forward_teacher(tokens));
      }
    }
    return traces;
  }

  /// Per-position fused logits for a teacher-forced sequence.
  std::vector<Tensor<T>> fused_teacher_logits(const std::vector<int>& tokens) const {
    const auto traces = teacher_traces(tokens);
    std::vector<Tensor<T>> out;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      std::vector<Tensor<T>> zs;
      for (const auto& tr : traces) zs.push_back(tr.logits[t]);
      out.push_back(fuse_logits(zs, spec.lambdas, spec.top_k));
    }
    return out;
  }
};

}  // namespace llmboost
