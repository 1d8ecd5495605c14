#pragma once

// Error-suppression and cross-entropy losses with logit-space gradients, plain
// gradient descent, the two-stage chain trainer, and the alignment/learning
// rate machinery of the guaranteed-descent analysis.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "llmboost/ensemble.hpp"
#include "llmboost/errors.hpp"
#include "llmboost/numkit.hpp"
#include "llmboost/tasks.hpp"
#include "llmboost/transformer.hpp"

namespace llmboost {

enum class Precision { F64, F32 };

struct TrainConfig {
  double alpha = 0.90;
  double beta = 0.10;
  double learning_rate = 0.05;
  int epochs = 10;
  int batch_size = 16;
  std::uint64_t seed = 1;
  Precision precision = Precision::F64;
  // Examples per epoch used for the per-epoch alignment estimate (0 disables).
  int alignment_samples = 8;

  void validate() const {
    if (!(alpha > 0) || !(beta > 0) || !(learning_rate > 0)) {
      throw ContractError("TrainConfig: alpha, beta and learning_rate must be positive");
    }
    if (epochs < 1 || batch_size < 1) throw ContractError("TrainConfig: epochs and batch_size must be >= 1");
  }
};

inline constexpr double kProbFloor = 1e-30;

template <typename T>
struct LossTerm {
  T value = 0;
  bool floored = false;  // a probability hit the 1e-30 floor
};

namespace detail {

template <typename T>
T floored_log(T p, bool& flag) {
  if (p < static_cast<T>(kProbFloor)) {
    flag = true;
    p = static_cast<T>(kProbFloor);
  }
  return std::log(p);
}

template <typename T>
void check_prob_args(const Tensor<T>& p, int gold, std::optional<int> err) {
  if (p.rank() != 1) throw ShapeError("loss: p must be 1-D");
  const int V = static_cast<int>(p.size());
  if (gold < 0 || gold >= V) throw RangeError("loss: gold id out of range");
  if (err) {
    if (*err < 0 || *err >= V) throw RangeError("loss: error token out of range");
    if (*err == gold) throw ContractError("loss: error token equals gold token");
  }
}

}  // namespace detail

/// -log sigmoid(beta (log p[gold] - log p[err])) when err is present, else 0.
template <typename T>
LossTerm<T> suppression_loss(const Tensor<T>& p, int gold, std::optional<int> err, double beta) {
  detail::check_prob_args(p, gold, err);
  LossTerm<T> out;
  if (!err) return out;
  const T u = static_cast<T>(beta) * (detail::floored_log(p[static_cast<std::size_t>(gold)], out.floored) -
                                      detail::floored_log(p[static_cast<std::size_t>(*err)], out.floored));
  out.value = neg_log_sigmoid(u);
  return out;
}

template <typename T>
LossTerm<T> cross_entropy(const Tensor<T>& p, int gold) {
  detail::check_prob_args(p, gold, std::nullopt);
  LossTerm<T> out;
  out.value = -detail::floored_log(p[static_cast<std::size_t>(gold)], out.floored);
  return out;
}

/// Sum of suppression terms plus alpha times summed cross-entropy over the
/// labelled positions of one sequence.
template <typename T>
LossTerm<T> total_loss(const std::vector<Tensor<T>>& logits, const std::vector<int>& gold,
                       const ErrorTokenTrace& errs, double alpha, double beta) {
  if (logits.size() != gold.size() || errs.size() != gold.size()) {
    throw ShapeError("total_loss: logits, gold and error trace lengths differ");
  }
  LossTerm<T> out;
  T ls = 0, ce = 0;
  for (std::size_t t = 0; t < gold.size(); ++t) {
    if (gold[t] == kNoLabel) continue;
    const Tensor<T> p = softmax(logits[t]);
    const auto s = suppression_loss(p, gold[t], errs[t], beta);
    const auto c = cross_entropy(p, gold[t]);
    ls += s.value;
    ce += c.value;
    out.floored = out.floored || s.floored || c.floored;
  }
  out.value = ls + static_cast<T>(alpha) * ce;
  return out;
}

/// alpha (p - y*) + [err] beta sigma(-u) (y_err - y*), u = beta (log p[gold] - log p[err]).
template <typename T>
Tensor<T> loss_logit_grad(const Tensor<T>& p, int gold, std::optional<int> err, double alpha, double beta) {
  detail::check_prob_args(p, gold, err);
  Tensor<T> g = p;
  for (auto& v : g.data()) v *= static_cast<T>(alpha);
  g[static_cast<std::size_t>(gold)] -= static_cast<T>(alpha);
  if (err) {
    bool flag = false;
    const T u = static_cast<T>(beta) * (detail::floored_log(p[static_cast<std::size_t>(gold)], flag) -
                                        detail::floored_log(p[static_cast<std::size_t>(*err)], flag));
    const T w = static_cast<T>(beta) * sigmoid(-u);
    g[static_cast<std::size_t>(*err)] += w;
    g[static_cast<std::size_t>(gold)] -= w;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Parameter bookkeeping.

/// Adapters are the trainable set when the model has them; a rank-0 model
/// trains its base weights instead.
inline bool is_trainable(const ModelSpec& spec, bool is_adapter) {
  return spec.adapter_rank > 0 ? is_adapter : !is_adapter;
}

template <typename T>
std::vector<T> flatten_trainable(const Model<T>& model, const Weights<T>& w) {
  std::vector<T> out;
  visit_params(w, [&](const std::string&, const Tensor<T>& t, bool adapter) {
    if (is_trainable(model.spec(), adapter)) out.insert(out.end(), t.data().begin(), t.data().end());
  });
  return out;
}

template <typename T>
void assign_trainable(const ModelSpec& spec, Weights<T>& w, std::span<const T> flat) {
  std::size_t off = 0;
  visit_params(w, [&](const std::string&, Tensor<T>& t, bool adapter) {
    if (!is_trainable(spec, adapter)) return;
    if (off + t.size() > flat.size()) throw ShapeError("assign_trainable: flat vector too short");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + t.size()), t.data().begin());
    off += t.size();
  });
  if (off != flat.size()) throw ShapeError("assign_trainable: flat vector too long");
}

/// params - lr * grads, elementwise.
template <typename T>
Tensor<T> sgd_step(const Tensor<T>& params, const Tensor<T>& grads, T lr) {
  if (params.shape() != grads.shape()) throw ShapeError("sgd_step: shape mismatch");
  Tensor<T> out = params;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= lr * grads[i];
  return out;
}

/// In-place descent on the trainable subset of a model's weights.
template <typename T>
void sgd_step(Model<T>& model, const Weights<T>& grads, T lr) {
  auto& w = model.weights();
  const ModelSpec& spec = model.spec();
  std::vector<const Tensor<T>*> gs;
  visit_params(grads, [&](const std::string&, const Tensor<T>& t, bool) { gs.push_back(&t); });
  std::size_t i = 0;
  visit_params(w, [&](const std::string& name, Tensor<T>& t, bool adapter) {
    const Tensor<T>& g = *gs[i++];
    if (!is_trainable(spec, adapter)) return;
    if (g.shape() != t.shape()) throw ShapeError("sgd_step: gradient shape mismatch for " + name);
    for (std::size_t k = 0; k < t.size(); ++k) t[k] -= lr * g[k];
  });
}

// ---------------------------------------------------------------------------
// Per-sequence loss and gradient.

/// Inputs a model needs for one training sequence: its own tokens plus, for
/// successors, the predecessor's fusion states and error tokens.
template <typename T>
struct ChainSample {
  const Example* example = nullptr;
  std::vector<FusionInputs<T>> fusion;  // empty for the base model
  ErrorTokenTrace errors;               // empty or one entry per position
};

struct LossWeights {
  double ce = 1.0;    // multiplier on summed cross-entropy
  double supp = 0.0;  // multiplier on summed suppression loss
  double beta = 0.1;
};

template <typename T>
struct SequenceLoss {
  T ce = 0;
  T supp = 0;
  std::size_t active_errors = 0;
};

/// Forward + backward of one sequence. Gradients of ce*CE + supp*Ls, scaled by
/// `scale`, are accumulated into `grads` (skipped when grads is null).
template <typename T>
SequenceLoss<T> sequence_loss_grad(const Model<T>& model, const ChainSample<T>& s, const LossWeights& lw,
                                   Weights<T>* grads, T scale = T(1)) {
  const Example& ex = *s.example;
  std::vector<StepTape<T>> tapes;
  const auto trace = model.forward_teacher(ex.input, s.fusion.empty() ? nullptr : &s.fusion,
                                           grads ? &tapes : nullptr);
  SequenceLoss<T> out;
  std::vector<std::vector<T>> dlogits(ex.input.size());
  const T beta = static_cast<T>(lw.beta);
  for (std::size_t t = 0; t < ex.input.size(); ++t) {
    const int gold = ex.gold[t];
    if (gold == kNoLabel) continue;
    const auto& z = trace.logits[t];
    std::vector<T> p(z.data());
    softmax_inplace<T>(p);
    const T mx = *std::max_element(z.data().begin(), z.data().end());
    T lse = 0;
    for (T v : z.data()) lse += std::exp(v - mx);
    lse = mx + std::log(lse);
    out.ce += lse - z[static_cast<std::size_t>(gold)];
    std::optional<int> err;
    if (!s.errors.empty()) err = s.errors[t];
    T supp_w = 0;
    if (err) {
      // log p[gold] - log p[err] == z[gold] - z[err]
      const T u = beta * (z[static_cast<std::size_t>(gold)] - z[static_cast<std::size_t>(*err)]);
      out.supp += neg_log_sigmoid(u);
      ++out.active_errors;
      supp_w = beta * sigmoid(-u);
    }
    if (grads) {
      auto& dl = dlogits[t];
      dl.resize(p.size());
      const T cw = static_cast<T>(lw.ce) * scale;
      for (std::size_t v = 0; v < p.size(); ++v) dl[v] = cw * p[v];
      dl[static_cast<std::size_t>(gold)] -= cw;
      if (err) {
        const T sw = static_cast<T>(lw.supp) * scale * supp_w;
        dl[static_cast<std::size_t>(*err)] += sw;
        dl[static_cast<std::size_t>(gold)] -= sw;
      }
    }
  }
  if (grads) model.backward(tapes, dlogits, *grads);
  return out;
}

template <typename T>
struct BatchLoss {
  T ce = 0;    // mean per-sequence summed CE
  T supp = 0;  // mean per-sequence summed suppression loss
  std::size_t active_errors = 0;
};

/// Mean over the batch of per-sequence losses and gradients. Summation order
/// follows the batch order, so results are reproducible.
template <typename T>
BatchLoss<T> batch_loss_grad(const Model<T>& model, const std::vector<const ChainSample<T>*>& batch,
                             const LossWeights& lw, Weights<T>* grads) {
  BatchLoss<T> out;
  if (batch.empty()) return out;
  const T scale = T(1) / static_cast<T>(batch.size());
  for (const auto* s : batch) {
    const auto l = sequence_loss_grad(model, *s, lw, grads, scale);
    out.ce += l.ce;
    out.supp += l.supp;
    out.active_errors += l.active_errors;
  }
  out.ce *= scale;
  out.supp *= scale;
  return out;
}

// ---------------------------------------------------------------------------
// Alignment constants and the descent learning-rate bound.

struct AlignmentEstimate {
  double rho = 0;
  double gamma = 0;
  int sample_count = 0;
};

/// Worst case over (g_s, g_ce) pairs: rho = max(-cos) clamped to [0, 1),
/// Gamma = max |g_s| / |g_ce| over pairs with nonzero g_ce.
template <typename T>
AlignmentEstimate alignment_from_pairs(const std::vector<std::pair<std::vector<T>, std::vector<T>>>& pairs) {
  AlignmentEstimate est;
  for (const auto& [gs, gce] : pairs) {
    const T ns = l2_norm<T>(gs);
    const T nc = l2_norm<T>(gce);
    if (!(nc > 0)) continue;
    ++est.sample_count;
    est.gamma = std::max(est.gamma, static_cast<double>(ns / nc));
    if (ns > 0) {
      const double neg_cos = -static_cast<double>(dot<T>(gs, gce) / (ns * nc));
      est.rho = std::max(est.rho, std::clamp(neg_cos, 0.0, std::nextafter(1.0, 0.0)));
    }
  }
  return est;
}

/// Per-sequence g_s and g_ce over the trainable parameters for every sample
/// with at least one active error token.
template <typename T>
AlignmentEstimate estimate_alignment(const Model<T>& model, const std::vector<const ChainSample<T>*>& batch,
                                     const TrainConfig& cfg) {
  std::vector<std::pair<std::vector<T>, std::vector<T>>> pairs;
  for (const auto* s : batch) {
    if (std::none_of(s->errors.begin(), s->errors.end(), [](const auto& e) { return e.has_value(); })) continue;
    Weights<T> gce = zeros_like(model.weights());
    Weights<T> gs = zeros_like(model.weights());
    sequence_loss_grad(model, *s, LossWeights{1.0, 0.0, cfg.beta}, &gce);
    sequence_loss_grad(model, *s, LossWeights{0.0, 1.0, cfg.beta}, &gs);
    pairs.emplace_back(flatten_trainable(model, gs), flatten_trainable(model, gce));
  }
  if (pairs.empty()) throw ContractError("estimate_alignment: batch has no active error tokens");
  return alignment_from_pairs(pairs);
}

/// eta*(alpha) = 2 (alpha - rho Gamma) / (L (alpha + Gamma)^2).
inline double descent_lr_bound(double alpha, double rho, double gamma, double l_smooth) {
  if (!(l_smooth > 0)) throw ContractError("descent_lr_bound: smoothness constant must be positive");
  if (!(alpha > rho * gamma)) {
    std::ostringstream os;
    os << "descent_lr_bound: alpha=" << alpha << " <= rho*Gamma=" << rho * gamma
       << "; the descent guarantee does not apply";
    throw BoundViolated(os.str());
  }
  return 2.0 * (alpha - rho * gamma) / (l_smooth * (alpha + gamma) * (alpha + gamma));
}

// ---------------------------------------------------------------------------
// Chain training.

struct EpochMetrics {
  int stage = 1;
  int model_index = 0;
  int epoch = 0;
  double ce = 0;    // mean per-sequence summed CE over the epoch
  double supp = 0;  // mean per-sequence summed suppression loss
  std::optional<double> rho, gamma, eta_bound;
  std::size_t active_errors = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["stage"] = stage;
    j["model"] = model_index;
    j["epoch"] = epoch;
    j["ce"] = ce;
    j["suppression"] = supp;
    j["active_errors"] = active_errors;
    j["rho"] = rho ? nlohmann::json(*rho) : nlohmann::json(nullptr);
    j["gamma"] = gamma ? nlohmann::json(*gamma) : nlohmann::json(nullptr);
    j["eta_bound"] = eta_bound ? nlohmann::json(*eta_bound) : nlohmann::json(nullptr);
    return j;
  }
};

template <typename T>
struct TrainResult {
  Ensemble<T> ensemble;
  std::vector<EpochMetrics> metrics;
};

/// Builds training samples for model `index`: the frozen chain 0..index-1 is
/// run teacher-forced to harvest fusion states and error tokens.
template <typename T>
std::vector<ChainSample<T>> prepare_samples(const Ensemble<T>& ens, std::size_t index, const Dataset& data) {
  std::vector<ChainSample<T>> out(data.size());
  const auto& spec = ens.models[index].spec();
  for (std::size_t k = 0; k < data.size(); ++k) {
    out[k].example = &data[k];
    if (index == 0) continue;
    std::vector<LayerTrace<T>> traces;
    for (std::size_t i = 0; i < index; ++i) {
      if (ens.fuses(i)) {
        const auto fin = build_fusion_inputs(traces.back(), ens.models[i].spec().fusion_period,
                                             ens.models[i].spec().n_layers);
        traces.push_back(ens.models[i].forward_teacher(data[k].input, &fin));
      } else {
        traces.push_back(ens.models[i].forward_teacher(data[k].input));
      }
    }
    const auto& pred = traces.back();
    if (ens.fuses(index)) out[k].fusion = build_fusion_inputs(pred, spec.fusion_period, spec.n_layers);
    out[k].errors = error_tokens(pred.logits, data[k].gold);
  }
  return out;
}

namespace detail {

template <typename T>
void check_dataset(const Ensemble<T>& ens, const Dataset& data) {
  if (data.empty()) throw ContractError("train: dataset is empty");
  const int V = ens.models.front().spec().vocab;
  const int Tmax = ens.models.front().spec().max_steps;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const auto& ex = data[k];
    if (ex.input.size() != ex.gold.size()) throw ContractError("train: example " + std::to_string(k) + " input/gold length mismatch");
    if (ex.input.empty() || static_cast<int>(ex.input.size()) > Tmax) {
      throw RangeError("train: example " + std::to_string(k) + " length outside [1, max_steps]");
    }
    for (std::size_t t = 0; t < ex.input.size(); ++t) {
      if (ex.input[t] < 0 || ex.input[t] >= V) throw RangeError("train: token out of vocabulary in example " + std::to_string(k));
      if (ex.gold[t] != kNoLabel && (ex.gold[t] < 0 || ex.gold[t] >= V)) {
        throw RangeError("train: gold out of vocabulary in example " + std::to_string(k));
      }
    }
  }
}

}  // namespace detail

/// Trains one model over its prepared samples with mini-batch descent.
/// Stage 1 uses pure CE; stage 2 uses alpha CE + suppression.
template <typename T>
std::vector<EpochMetrics> train_model(Model<T>& model, const std::vector<ChainSample<T>>& samples,
                                      const TrainConfig& cfg, int stage, int model_index,
                                      const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  const LossWeights lw = stage == 1 ? LossWeights{1.0, 0.0, cfg.beta} : LossWeights{cfg.alpha, 1.0, cfg.beta};
  std::mt19937_64 rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(model_index));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochMetrics> metrics;
  std::vector<T> prev_params, prev_grad;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochMetrics m;
    m.stage = stage;
    m.model_index = model_index;
    m.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const ChainSample<T>*> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size)); ++k) {
        batch.push_back(&samples[order[k]]);
      }
      Weights<T> grads = zeros_like(model.weights());
      const auto l = batch_loss_grad(model, batch, lw, &grads);
      if (!std::isfinite(static_cast<double>(l.ce)) || !std::isfinite(static_cast<double>(l.supp))) {
        std::ostringstream os;
        os << "training diverged: stage " << stage << " model " << model_index << " epoch " << epoch
           << " batch " << batches << " produced a non-finite loss (ce=" << l.ce << ", supp=" << l.supp
           << "); lower the learning rate";
        throw TrainingError(os.str());
      }
      m.ce += static_cast<double>(l.ce);
      m.supp += static_cast<double>(l.supp);
      m.active_errors += l.active_errors;
      sgd_step(model, grads, static_cast<T>(cfg.learning_rate));
      ++batches;
    }
    m.ce /= static_cast<double>(batches);
    m.supp /= static_cast<double>(batches);

    if (stage == 2 && cfg.alignment_samples > 0) {
      std::vector<const ChainSample<T>*> probe;
      for (const auto& s : samples) {
        if (static_cast<int>(probe.size()) >= cfg.alignment_samples) break;
        if (std::any_of(s.errors.begin(), s.errors.end(), [](const auto& e) { return e.has_value(); })) {
          probe.push_back(&s);
        }
      }
      if (!probe.empty()) {
        const auto est = estimate_alignment(model, probe, cfg);
        m.rho = est.rho;
        m.gamma = est.gamma;
        // Secant smoothness estimate between consecutive epoch-end points.
        Weights<T> g = zeros_like(model.weights());
        batch_loss_grad(model, probe, LossWeights{1.0, 0.0, cfg.beta}, &g);
        auto params = flatten_trainable(model, model.weights());
        auto grad = flatten_trainable(model, g);
        if (!prev_params.empty()) {
          T num = 0, den = 0;
          for (std::size_t i = 0; i < params.size(); ++i) {
            num += (grad[i] - prev_grad[i]) * (grad[i] - prev_grad[i]);
            den += (params[i] - prev_params[i]) * (params[i] - prev_params[i]);
          }
          if (den > 0 && num > 0 && cfg.alpha > est.rho * est.gamma) {
            m.eta_bound = descent_lr_bound(cfg.alpha, est.rho, est.gamma,
                                           static_cast<double>(std::sqrt(num / den)));
          }
        }
        prev_params = std::move(params);
        prev_grad = std::move(grad);
      }
    }
    metrics.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return metrics;
}

/// Two-stage chain training: the base model on CE, then each successor on
/// alpha CE + suppression against its frozen predecessor's trace.
template <typename T>
TrainResult<T> train_chain(Ensemble<T> ensemble, const Dataset& data, const TrainConfig& cfg,
                           const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  ensemble.validate();
  detail::check_dataset(ensemble, data);
  TrainResult<T> result;
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    const auto samples = prepare_samples(ensemble, i, data);
    auto m = train_model(ensemble.models[i], samples, cfg, i == 0 ? 1 : 2, static_cast<int>(i), on_epoch);
    result.metrics.insert(result.metrics.end(), m.begin(), m.end());
  }
  result.ensemble = std::move(ensemble);
  return result;
}

/// Teacher-forced next-token accuracy over labelled positions using the
/// fused logits of the first `members` models (1 = base model alone).
template <typename T>
double token_accuracy(const Ensemble<T>& ens, const Dataset& data, std::size_t members) {
  if (members < 1 || members > ens.size()) throw ContractError("token_accuracy: members out of range");
  const std::vector<double> lambdas(ens.spec.lambdas.begin(), ens.spec.lambdas.begin() + static_cast<std::ptrdiff_t>(members - 1));
  std::size_t hit = 0, total = 0;
  for (const auto& ex : data) {
    const auto traces = ens.teacher_traces(ex.input);
    for (std::size_t t = 0; t < ex.input.size(); ++t) {
      if (ex.gold[t] == kNoLabel) continue;
      std::vector<Tensor<T>> zs;
      for (std::size_t i = 0; i < members; ++i) zs.push_back(traces[i].logits[t]);
      const auto z = fuse_logits(zs, lambdas, ens.spec.top_k);
      hit += static_cast<int>(argmax<T>(z.span())) == ex.gold[t];
      ++total;
    }
  }
  if (total == 0) throw ContractError("token_accuracy: dataset has no labelled positions");
  return static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace llmboost
