#pragma once

// Toy decoder-only transformer with per-layer hidden-state taps and
// cross-model fusion injection points.
//
// Layer indexing is 1-based: layer l consumes h_{l-1} and produces h_l, and
// h_0 is the embedding output. A layer fuses when the caller supplies a
// predecessor state for it (normally when l % fusion_period == 0). A fusing
// layer replaces the pre-norm attention sub-block with
//
//     h~ = LayerNorm(h_own + h_pred)           (unit gain, zero bias)
//     a  = Attention(Q,K,V all projected from h~)
//     u  = LayerNorm_r(a + h~)                 (learned gain/bias)
//
// and then runs the same MLP sub-block as a standard layer. Non-fusing layers
// are standard pre-norm blocks: u = x + Attention(LN1(x)).
//
// Low-rank adapters on W_Q and W_V are applied as x W + (x A) B so that a
// zero B (or rank 0) leaves the base computation bit-identical.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "llmboost/errors.hpp"
#include "llmboost/numkit.hpp"

namespace llmboost {

struct ModelSpec {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int vocab = 64;
  int max_steps = 64;
  int fusion_period = 2;
  int adapter_rank = 4;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab < 1 || max_steps < 1 ||
        fusion_period < 1) {
      throw ContractError("ModelSpec: all sizes must be positive");
    }
    if (adapter_rank < 0) throw ContractError("ModelSpec: adapter_rank must be >= 0");
    if (d_model % n_heads != 0) throw ContractError("ModelSpec: n_heads must divide d_model");
  }

  bool is_fusion_layer(int l) const { return l % fusion_period == 0; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class AdapterTarget { W_Q, W_V };

template <typename T>
struct Adapter {
  AdapterTarget target = AdapterTarget::W_Q;
  Tensor<T> a;  // [d_model, r]
  Tensor<T> b;  // [r, d_model]

  std::size_t rank() const { return a.rank() == 2 ? a.cols() : 0; }
};

/// base + A B. With rank 0 the base is returned unchanged.
template <typename T>
Tensor<T> apply_adapter(const Tensor<T>& base, const Adapter<T>& adapter) {
  if (base.rank() != 2 || base.rows() != base.cols()) {
    throw ShapeError("apply_adapter: base must be square, got " + base.shape_string());
  }
  const std::size_t d = base.rows();
  const std::size_t r = adapter.rank();
  if (adapter.a.rank() != 2 || adapter.a.rows() != d || adapter.b.rank() != 2 ||
      adapter.b.rows() != r || adapter.b.cols() != d) {
    throw ShapeError("apply_adapter: adapter shapes " + adapter.a.shape_string() + " / " +
                     adapter.b.shape_string() + " do not conform to base " + base.shape_string());
  }
  if (r == 0) return base;
  Tensor<T> out = base;
  const Tensor<T> delta = matmul(adapter.a, adapter.b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += delta[i];
  return out;
}

template <typename T>
struct LayerWeights {
  Tensor<T> wq, wk, wv, wo;        // [d, d]
  Tensor<T> ln1_g, ln1_b;          // pre-attention norm (standard layers)
  Tensor<T> lnr_g, lnr_b;          // post-attention residual norm (fusing layers)
  Tensor<T> ln2_g, ln2_b;          // pre-MLP norm
  Tensor<T> w1, c1;                // [d, ff], [ff]
  Tensor<T> w2, c2;                // [ff, d], [d]
  Adapter<T> aq{AdapterTarget::W_Q, {}, {}};
  Adapter<T> av{AdapterTarget::W_V, {}, {}};
};

template <typename T>
struct Weights {
  Tensor<T> tok_emb;  // [V, d]
  Tensor<T> pos_emb;  // [T_max, d]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> lnf_g, lnf_b;  // [d]
  Tensor<T> w_out;         // [d, V]
  Tensor<T> b_out;         // [V]
};

/// Visits every parameter tensor with (name, tensor, is_adapter). W may be
/// const or mutable. Order is fixed and defines the flattening order.
template <typename W, typename F>
void visit_params(W& w, F&& f) {
  f(std::string("tok_emb"), w.tok_emb, false);
  f(std::string("pos_emb"), w.pos_emb, false);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& L = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    f(p + "wq", L.wq, false);
    f(p + "wk", L.wk, false);
    f(p + "wv", L.wv, false);
    f(p + "wo", L.wo, false);
    f(p + "ln1_g", L.ln1_g, false);
    f(p + "ln1_b", L.ln1_b, false);
    f(p + "lnr_g", L.lnr_g, false);
    f(p + "lnr_b", L.lnr_b, false);
    f(p + "ln2_g", L.ln2_g, false);
    f(p + "ln2_b", L.ln2_b, false);
    f(p + "w1", L.w1, false);
    f(p + "c1", L.c1, false);
    f(p + "w2", L.w2, false);
    f(p + "c2", L.c2, false);
    f(p + "aq.a", L.aq.a, true);
    f(p + "aq.b", L.aq.b, true);
    f(p + "av.a", L.av.a, true);
    f(p + "av.b", L.av.b, true);
  }
  f(std::string("lnf_g"), w.lnf_g, false);
  f(std::string("lnf_b"), w.lnf_b, false);
  f(std::string("w_out"), w.w_out, false);
  f(std::string("b_out"), w.b_out, false);
}

template <typename T>
Weights<T> zeros_like(const Weights<T>& w) {
  Weights<T> z = w;
  visit_params(z, [](const std::string&, Tensor<T>& t, bool) { t.fill(T(0)); });
  return z;
}

template <typename T>
struct KvCache {
  std::size_t d_model = 0;
  std::size_t len = 0;  // committed steps
  std::vector<std::vector<T>> keys;
  std::vector<std::vector<T>> values;

  KvCache() = default;
  KvCache(std::size_t n_layers, std::size_t d) : d_model(d), keys(n_layers), values(n_layers) {}

  std::size_t steps() const { return len; }

  bool consistent() const {
    for (std::size_t l = 0; l < keys.size(); ++l) {
      if (keys[l].size() != len * d_model || values[l].size() != len * d_model) return false;
    }
    return true;
  }
};

/// Per-layer predecessor states for one step, keyed by successor layer (1-based).
template <typename T>
using FusionInputs = std::map<int, Tensor<T>>;

template <typename T>
struct StepOutput {
  Tensor<T> logits;                  // [V]
  std::vector<Tensor<T>> layer_states;  // L+1 entries, index 0 = embedding output
};

template <typename T>
struct LayerTrace {
  std::vector<std::vector<Tensor<T>>> states;  // [t][l], l = 0..L
  std::vector<Tensor<T>> logits;               // [t]

  std::size_t steps() const { return logits.size(); }
};

// Activations recorded during a forward pass for the manual backward pass.
template <typename T>
struct LayerTape {
  bool fused = false;
  std::vector<T> x;            // layer input h_{l-1}
  std::vector<T> stream;       // h~ (fused) or LN1(x) (standard)
  std::vector<T> stream_normed;
  T stream_inv = 0;
  std::vector<T> q, k, v;
  std::vector<T> qa, va;       // stream A for the two adapters
  std::vector<T> probs;        // [H, t+1]
  std::vector<T> o;            // concatenated heads
  std::vector<T> res_normed;   // fused: normed(attn + h~)
  T res_inv = 0;
  std::vector<T> u;
  std::vector<T> mlp_in, mlp_normed;
  T mlp_inv = 0;
  std::vector<T> f_pre, f;
};

template <typename T>
struct StepTape {
  int token = 0;
  std::size_t pos = 0;
  std::vector<LayerTape<T>> layers;
  std::vector<T> final_in, final_normed, final_out;
  T final_inv = 0;
};

namespace detail {

template <typename T>
T gelu(T x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  constexpr T k = T(0.7978845608028654);
  const T inner = k * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(inner);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * k * (T(1) + T(3) * T(0.044715) * x * x);
}

}  // namespace detail

template <typename T>
class Model {
 public:
  static constexpr T kNormEps = T(1e-5);

  Model() = default;

  explicit Model(const ModelSpec& spec) : spec_(spec) {
    spec_.validate();
    init_weights();
  }

  Model(const ModelSpec& spec, Weights<T> weights) : spec_(spec), w_(std::move(weights)) {
    spec_.validate();
  }

  const ModelSpec& spec() const { return spec_; }
  const Weights<T>& weights() const { return w_; }
  Weights<T>& weights() { return w_; }

  std::size_t d() const { return static_cast<std::size_t>(spec_.d_model); }
  int n_layers() const { return spec_.n_layers; }

  KvCache<T> new_cache() const { return KvCache<T>(spec_.n_layers, d()); }

  // --- layer-granular API (used directly by the pipelined decoder) --------

  void embed(int token, std::size_t pos, std::span<T> out) const {
    if (token < 0 || token >= spec_.vocab) {
      throw RangeError("token id " + std::to_string(token) + " outside vocabulary of size " +
                       std::to_string(spec_.vocab));
    }
    if (pos >= static_cast<std::size_t>(spec_.max_steps)) {
      throw RangeError("position " + std::to_string(pos) + " exceeds max_steps " +
                       std::to_string(spec_.max_steps));
    }
    const auto te = w_.tok_emb.row(static_cast<std::size_t>(token));
    const auto pe = w_.pos_emb.row(pos);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = te[i] + pe[i];
  }

  /// Runs layer l (1-based) for the step at position cache.len. `pred` is the
  /// predecessor's layer-(l-1) state; empty means a standard block.
  void layer_step(int l, std::span<const T> x, std::span<const T> pred, KvCache<T>& cache,
                  std::span<T> out, LayerTape<T>* tape = nullptr) const {
    const std::size_t dm = d();
    const std::size_t H = static_cast<std::size_t>(spec_.n_heads);
    const std::size_t dh = dm / H;
    const std::size_t ff = static_cast<std::size_t>(spec_.d_ff);
    const auto& w = w_.layers[static_cast<std::size_t>(l - 1)];
    const std::size_t t = cache.len;
    auto& keys = cache.keys[static_cast<std::size_t>(l - 1)];
    auto& vals = cache.values[static_cast<std::size_t>(l - 1)];
    if (keys.size() != t * dm) throw ContractError("kv cache out of step for layer " + std::to_string(l));
    const bool fused = !pred.empty();

    std::vector<T> stream(dm), normed(dm);
    T inv;
    if (fused) {
      std::vector<T> s(dm);
      for (std::size_t i = 0; i < dm; ++i) s[i] = x[i] + pred[i];
      inv = layer_norm_span<T>(s, {}, {}, kNormEps, stream, normed).inv_std;
    } else {
      inv = layer_norm_span<T>(x, w.ln1_g.span(), w.ln1_b.span(), kNormEps, stream, normed).inv_std;
    }

    std::vector<T> q(dm), k(dm), v(dm), qa, va;
    project(stream, w.wq, w.aq, q, qa);
    vec_mat<T>(stream, w.wk.ptr(), dm, dm, k);
    project(stream, w.wv, w.av, v, va);
    keys.insert(keys.end(), k.begin(), k.end());
    vals.insert(vals.end(), v.begin(), v.end());

    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<T> probs(H * (t + 1));
    std::vector<T> o(dm, T(0));
    for (std::size_t h = 0; h < H; ++h) {
      std::span<T> ph(probs.data() + h * (t + 1), t + 1);
      for (std::size_t j = 0; j <= t; ++j) {
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += q[h * dh + c] * keys[j * dm + h * dh + c];
        ph[j] = s * scale;
      }
      softmax_inplace(ph);
      for (std::size_t j = 0; j <= t; ++j) {
        const T a = ph[j];
        for (std::size_t c = 0; c < dh; ++c) o[h * dh + c] += a * vals[j * dm + h * dh + c];
      }
    }
    std::vector<T> attn(dm);
    vec_mat<T>(o, w.wo.ptr(), dm, dm, attn);

    std::vector<T> u(dm), res_normed;
    T res_inv = 0;
    if (fused) {
      std::vector<T> r(dm);
      res_normed.resize(dm);
      for (std::size_t i = 0; i < dm; ++i) r[i] = attn[i] + stream[i];
      res_inv = layer_norm_span<T>(r, w.lnr_g.span(), w.lnr_b.span(), kNormEps, u, res_normed).inv_std;
    } else {
      for (std::size_t i = 0; i < dm; ++i) u[i] = x[i] + attn[i];
    }

    std::vector<T> mlp_in(dm), mlp_normed(dm);
    const T mlp_inv =
        layer_norm_span<T>(u, w.ln2_g.span(), w.ln2_b.span(), kNormEps, mlp_in, mlp_normed).inv_std;
    std::vector<T> f_pre(w.c1.data());
    vec_mat_acc<T>(mlp_in, w.w1.ptr(), dm, ff, f_pre);
    std::vector<T> f(ff);
    for (std::size_t i = 0; i < ff; ++i) f[i] = detail::gelu(f_pre[i]);
    for (std::size_t i = 0; i < dm; ++i) out[i] = u[i] + w.c2[i];
    vec_mat_acc<T>(f, w.w2.ptr(), ff, dm, out);

    if (tape) {
      tape->fused = fused;
      tape->x.assign(x.begin(), x.end());
      tape->stream = std::move(stream);
      tape->stream_normed = std::move(normed);
      tape->stream_inv = inv;
      tape->q = std::move(q);
      tape->k = std::move(k);
      tape->v = std::move(v);
      tape->qa = std::move(qa);
      tape->va = std::move(va);
      tape->probs = std::move(probs);
      tape->o = std::move(o);
      tape->res_normed = std::move(res_normed);
      tape->res_inv = res_inv;
      tape->u = std::move(u);
      tape->mlp_in = std::move(mlp_in);
      tape->mlp_normed = std::move(mlp_normed);
      tape->mlp_inv = mlp_inv;
      tape->f_pre = std::move(f_pre);
      tape->f = std::move(f);
    }
  }

  /// Final norm + unembedding. Commits the step in the cache.
  void head(std::span<const T> h_last, KvCache<T>& cache, std::span<T> logits,
            StepTape<T>* tape = nullptr) const {
    const std::size_t dm = d();
    const std::size_t V = static_cast<std::size_t>(spec_.vocab);
    std::vector<T> normed(dm), out(dm);
    const T inv = layer_norm_span<T>(h_last, w_.lnf_g.span(), w_.lnf_b.span(), kNormEps, out, normed)
                      .inv_std;
    std::copy(w_.b_out.data().begin(), w_.b_out.data().end(), logits.begin());
    vec_mat_acc<T>(out, w_.w_out.ptr(), dm, V, logits);
    commit(cache);
    if (tape) {
      tape->final_in.assign(h_last.begin(), h_last.end());
      tape->final_normed = std::move(normed);
      tape->final_out = std::move(out);
      tape->final_inv = inv;
    }
  }

  // --- step-level API -----------------------------------------------------

  StepOutput<T> forward_step(int token, KvCache<T>& cache, const FusionInputs<T>* fusion = nullptr,
                             StepTape<T>* tape = nullptr) const {
    const std::size_t dm = d();
    const int L = spec_.n_layers;
    if (fusion) {
      for (int l = 1; l <= L; ++l) {
        if (!spec_.is_fusion_layer(l)) continue;
        auto it = fusion->find(l);
        if (it == fusion->end()) {
          throw ContractError("missing fusion vector for layer " + std::to_string(l));
        }
        if (it->second.size() != dm) {
          throw ShapeError("fusion vector for layer " + std::to_string(l) + " has length " +
                           std::to_string(it->second.size()));
        }
      }
    }
    StepOutput<T> out;
    out.layer_states.reserve(static_cast<std::size_t>(L) + 1);
    Tensor<T> h({dm});
    embed(token, cache.len, h.span());
    if (tape) {
      tape->token = token;
      tape->pos = cache.len;
      tape->layers.assign(static_cast<std::size_t>(L), {});
    }
    out.layer_states.push_back(h);
    for (int l = 1; l <= L; ++l) {
      std::span<const T> pred;
      if (fusion && spec_.is_fusion_layer(l)) pred = fusion->at(l).span();
      Tensor<T> next({dm});
      layer_step(l, h.span(), pred, cache, next.span(),
                 tape ? &tape->layers[static_cast<std::size_t>(l - 1)] : nullptr);
      h = std::move(next);
      out.layer_states.push_back(h);
    }
    out.logits = Tensor<T>({static_cast<std::size_t>(spec_.vocab)});
    head(h.span(), cache, out.logits.span(), tape);
    return out;
  }

  /// Teacher-forced pass over a whole sequence; the fold of forward_step.
  LayerTrace<T> forward_teacher(const std::vector<int>& tokens,
                                const std::vector<FusionInputs<T>>* fusion = nullptr,
                                std::vector<StepTape<T>>* tapes = nullptr) const {
    if (tokens.size() > static_cast<std::size_t>(spec_.max_steps)) {
      throw RangeError("sequence length " + std::to_string(tokens.size()) + " exceeds max_steps " +
                       std::to_string(spec_.max_steps));
    }
    if (fusion && fusion->size() < tokens.size()) {
      throw ContractError("fusion trace shorter than the token sequence");
    }
    KvCache<T> cache = new_cache();
    LayerTrace<T> trace;
    if (tapes) tapes->assign(tokens.size(), {});
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      auto step = forward_step(tokens[t], cache, fusion ? &(*fusion)[t] : nullptr,
                               tapes ? &(*tapes)[t] : nullptr);
      trace.states.push_back(std::move(step.layer_states));
      trace.logits.push_back(std::move(step.logits));
    }
    return trace;
  }

  /// Backpropagates per-step logit gradients through a recorded sequence and
  /// accumulates parameter gradients into `grads` (same layout as weights()).
  void backward(const std::vector<StepTape<T>>& tapes, const std::vector<std::vector<T>>& dlogits,
                Weights<T>& grads) const {
    const std::size_t dm = d();
    const std::size_t V = static_cast<std::size_t>(spec_.vocab);
    const std::size_t L = static_cast<std::size_t>(spec_.n_layers);
    const std::size_t n = tapes.size();
    if (dlogits.size() != n) throw ShapeError("backward: dlogits/tape length mismatch");

    // Reconstruct the keys/values every step attended over.
    std::vector<std::vector<T>> keys(L), vals(L), dkeys(L), dvals(L);
    for (std::size_t l = 0; l < L; ++l) {
      keys[l].resize(n * dm);
      vals[l].resize(n * dm);
      dkeys[l].assign(n * dm, T(0));
      dvals[l].assign(n * dm, T(0));
      for (std::size_t t = 0; t < n; ++t) {
        std::copy(tapes[t].layers[l].k.begin(), tapes[t].layers[l].k.end(), keys[l].begin() + t * dm);
        std::copy(tapes[t].layers[l].v.begin(), tapes[t].layers[l].v.end(), vals[l].begin() + t * dm);
      }
    }

    std::vector<T> dh(dm), dx(dm);
    for (std::size_t tt = n; tt-- > 0;) {
      const auto& tape = tapes[tt];
      const auto& dl = dlogits[tt];
      if (dl.empty()) {
        std::fill(dh.begin(), dh.end(), T(0));
      } else {
        if (dl.size() != V) throw ShapeError("backward: dlogits entry has wrong length");
        for (std::size_t j = 0; j < V; ++j) grads.b_out[j] += dl[j];
        outer_acc<T>(tape.final_out, dl, grads.w_out.ptr());
        std::vector<T> dout(dm, T(0));
        mat_vec_acc<T>(w_.w_out.ptr(), dm, V, dl, dout);
        std::fill(dh.begin(), dh.end(), T(0));
        layer_norm_backward<T>(dout, tape.final_normed, tape.final_inv, w_.lnf_g.span(), dh,
                               grads.lnf_g.span(), grads.lnf_b.span());
      }
      for (std::size_t l = L; l-- > 0;) {
        std::fill(dx.begin(), dx.end(), T(0));
        layer_backward(l, tt, tape.layers[l], dh, keys[l], vals[l], dkeys[l], dvals[l],
                       grads.layers[l], dx);
        dh.swap(dx);
      }
      auto te = grads.tok_emb.row(static_cast<std::size_t>(tape.token));
      auto pe = grads.pos_emb.row(tape.pos);
      for (std::size_t i = 0; i < dm; ++i) {
        te[i] += dh[i];
        pe[i] += dh[i];
      }
    }
  }

 private:
  void commit(KvCache<T>& cache) const {
    const std::size_t want = (cache.len + 1) * cache.d_model;
    for (std::size_t l = 0; l < cache.keys.size(); ++l) {
      if (cache.keys[l].size() != want || cache.values[l].size() != want) {
        throw ContractError("kv cache commit with incomplete layer " + std::to_string(l + 1));
      }
    }
    ++cache.len;
  }

  void project(std::span<const T> x, const Tensor<T>& w, const Adapter<T>& ad, std::span<T> y,
               std::vector<T>& xa) const {
    const std::size_t dm = d();
    vec_mat<T>(x, w.ptr(), dm, dm, y);
    const std::size_t r = ad.rank();
    if (r == 0) {
      xa.clear();
      return;
    }
    xa.assign(r, T(0));
    vec_mat<T>(x, ad.a.ptr(), dm, r, xa);
    vec_mat_acc<T>(xa, ad.b.ptr(), r, dm, y);
  }

  // Backward of project(): accumulates dW, dA, dB and dx.
  void project_backward(std::span<const T> x, std::span<const T> xa, std::span<const T> dy,
                        const Tensor<T>& w, const Adapter<T>& ad, Tensor<T>& dw, Adapter<T>& dad,
                        std::span<T> dx) const {
    const std::size_t dm = d();
    outer_acc<T>(x, dy, dw.ptr());
    mat_vec_acc<T>(w.ptr(), dm, dm, dy, dx);
    const std::size_t r = ad.rank();
    if (r == 0) return;
    outer_acc<T>(xa, dy, dad.b.ptr());
    std::vector<T> dxa(r, T(0));
    mat_vec_acc<T>(ad.b.ptr(), r, dm, dy, dxa);
    outer_acc<T>(x, dxa, dad.a.ptr());
    mat_vec_acc<T>(ad.a.ptr(), dm, r, dxa, dx);
  }

  void layer_backward(std::size_t li, std::size_t t, const LayerTape<T>& tp, std::span<const T> dh,
                      const std::vector<T>& keys, const std::vector<T>& vals, std::vector<T>& dkeys,
                      std::vector<T>& dvals, LayerWeights<T>& g, std::span<T> dx) const {
    const std::size_t dm = d();
    const std::size_t H = static_cast<std::size_t>(spec_.n_heads);
    const std::size_t dhd = dm / H;
    const std::size_t ff = static_cast<std::size_t>(spec_.d_ff);
    const auto& w = w_.layers[li];

    // MLP sub-block: out = u + gelu(LN2(u) W1 + c1) W2 + c2
    std::vector<T> du(dh.begin(), dh.end());
    for (std::size_t i = 0; i < dm; ++i) g.c2[i] += dh[i];
    outer_acc<T>(tp.f, dh, g.w2.ptr());
    std::vector<T> df(ff, T(0));
    mat_vec_acc<T>(w.w2.ptr(), ff, dm, dh, df);
    for (std::size_t i = 0; i < ff; ++i) {
      df[i] *= detail::gelu_grad(tp.f_pre[i]);
      g.c1[i] += df[i];
    }
    outer_acc<T>(tp.mlp_in, df, g.w1.ptr());
    std::vector<T> dmlp(dm, T(0));
    mat_vec_acc<T>(w.w1.ptr(), dm, ff, df, dmlp);
    layer_norm_backward<T>(dmlp, tp.mlp_normed, tp.mlp_inv, w.ln2_g.span(), du, g.ln2_g.span(),
                           g.ln2_b.span());

    // Attention sub-block.
    std::vector<T> dattn(dm, T(0)), dstream(dm, T(0));
    if (tp.fused) {
      // u = LN_r(attn + stream)
      layer_norm_backward<T>(du, tp.res_normed, tp.res_inv, w.lnr_g.span(), dattn, g.lnr_g.span(),
                             g.lnr_b.span());
      dstream = dattn;
    } else {
      dattn = du;
      for (std::size_t i = 0; i < dm; ++i) dx[i] += du[i];
    }
    outer_acc<T>(tp.o, dattn, g.wo.ptr());
    std::vector<T> dout(dm, T(0));
    mat_vec_acc<T>(w.wo.ptr(), dm, dm, dattn, dout);

    const T scale = T(1) / std::sqrt(static_cast<T>(dhd));
    std::vector<T> dq(dm, T(0));
    for (std::size_t h = 0; h < H; ++h) {
      const T* ph = tp.probs.data() + h * (t + 1);
      std::vector<T> dp(t + 1);
      T weighted = 0;
      for (std::size_t j = 0; j <= t; ++j) {
        T s = 0;
        for (std::size_t c = 0; c < dhd; ++c) {
          s += dout[h * dhd + c] * vals[j * dm + h * dhd + c];
          dvals[j * dm + h * dhd + c] += ph[j] * dout[h * dhd + c];
        }
        dp[j] = s;
        weighted += ph[j] * s;
      }
      for (std::size_t j = 0; j <= t; ++j) {
        const T ds = ph[j] * (dp[j] - weighted) * scale;
        for (std::size_t c = 0; c < dhd; ++c) {
          dq[h * dhd + c] += ds * keys[j * dm + h * dhd + c];
          dkeys[j * dm + h * dhd + c] += ds * tp.q[h * dhd + c];
        }
      }
    }
    std::span<const T> dk(dkeys.data() + t * dm, dm);
    std::span<const T> dv(dvals.data() + t * dm, dm);

    project_backward(tp.stream, tp.qa, dq, w.wq, w.aq, g.wq, g.aq, dstream);
    outer_acc<T>(tp.stream, dk, g.wk.ptr());
    mat_vec_acc<T>(w.wk.ptr(), dm, dm, dk, dstream);
    project_backward(tp.stream, tp.va, dv, w.wv, w.av, g.wv, g.av, dstream);

    if (tp.fused) {
      // stream = LN(x + pred), no parameters; the predecessor is frozen.
      layer_norm_backward<T>(dstream, tp.stream_normed, tp.stream_inv, {}, dx, {}, {});
    } else {
      layer_norm_backward<T>(dstream, tp.stream_normed, tp.stream_inv, w.ln1_g.span(), dx,
                             g.ln1_g.span(), g.ln1_b.span());
    }
  }

  void init_weights() {
    std::mt19937_64 rng(spec_.seed);
    const std::size_t dm = d();
    const std::size_t V = static_cast<std::size_t>(spec_.vocab);
    const std::size_t ff = static_cast<std::size_t>(spec_.d_ff);
    const std::size_t r = static_cast<std::size_t>(spec_.adapter_rank);
    const T sd = T(1) / std::sqrt(static_cast<T>(dm));
    const T sf = T(1) / std::sqrt(static_cast<T>(ff));
    w_.tok_emb = random_normal<T>({V, dm}, rng, T(1));
    w_.pos_emb = random_normal<T>({static_cast<std::size_t>(spec_.max_steps), dm}, rng, T(0.5));
    w_.layers.resize(static_cast<std::size_t>(spec_.n_layers));
    for (auto& L : w_.layers) {
      L.wq = random_normal<T>({dm, dm}, rng, sd);
      L.wk = random_normal<T>({dm, dm}, rng, sd);
      L.wv = random_normal<T>({dm, dm}, rng, sd);
      L.wo = random_normal<T>({dm, dm}, rng, sd);
      L.ln1_g = Tensor<T>({dm}, T(1));
      L.ln1_b = Tensor<T>({dm}, T(0));
      L.lnr_g = Tensor<T>({dm}, T(1));
      L.lnr_b = Tensor<T>({dm}, T(0));
      L.ln2_g = Tensor<T>({dm}, T(1));
      L.ln2_b = Tensor<T>({dm}, T(0));
      L.w1 = random_normal<T>({dm, ff}, rng, sd);
      L.c1 = Tensor<T>({ff}, T(0));
      L.w2 = random_normal<T>({ff, dm}, rng, sf);
      L.c2 = Tensor<T>({dm}, T(0));
      L.aq = Adapter<T>{AdapterTarget::W_Q, random_normal<T>({dm, r}, rng, sd), Tensor<T>({r, dm}, T(0))};
      L.av = Adapter<T>{AdapterTarget::W_V, random_normal<T>({dm, r}, rng, sd), Tensor<T>({r, dm}, T(0))};
    }
    w_.lnf_g = Tensor<T>({dm}, T(1));
    w_.lnf_b = Tensor<T>({dm}, T(0));
    w_.w_out = random_normal<T>({dm, V}, rng, sd);
    w_.b_out = Tensor<T>({V}, T(0));
  }

  ModelSpec spec_;
  Weights<T> w_;
};

}  // namespace llmboost
