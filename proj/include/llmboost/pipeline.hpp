#pragma once

// Greedy ensemble decoding. decode_sequential runs the chain one model at a
// time per step; decode_pipelined runs one worker per model (or per executor)
// and streams layer states between them through a write-once StatePool.

#include <chrono>
#include <condition_variable>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "llmboost/ensemble.hpp"
#include "llmboost/errors.hpp"
#include "llmboost/transformer.hpp"

namespace llmboost {

struct HiddenKey {
  int model = 0;
  int layer = 0;  // 0 = embedding output
  int step = 0;

  auto operator<=>(const HiddenKey&) const = default;

  std::string str() const {
    return "(model " + std::to_string(model) + ", layer " + std::to_string(layer) + ", step " +
           std::to_string(step) + ")";
  }
};

using Clock = std::chrono::steady_clock;

inline double micros_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::micro>(b - a).count();
}

/// Time spent inside one pool read, split into waiting for the producer and
/// the lock/copy work after the value became available.
struct GetTiming {
  double blocked_us = 0;
  double transfer_us = 0;
};

template <typename T>
class StatePool {
 public:
  using ms = std::chrono::milliseconds;

  void put(const HiddenKey& key, Tensor<T> value) {
    const auto t0 = Clock::now();
    {
      std::lock_guard lk(mu_);
      check_open();
      if (!hidden_.emplace(key, std::move(value)).second) {
        throw ProtocolError("duplicate write to hidden state " + key.str());
      }
      ++puts_;
      put_us_ += micros_between(t0, Clock::now());
    }
    cv_.notify_all();
  }

  Tensor<T> get(const HiddenKey& key, ms timeout, GetTiming* timing = nullptr) {
    const auto t0 = Clock::now();
    std::unique_lock lk(mu_);
    const bool ok = cv_.wait_until(lk, t0 + timeout, [&] { return aborted_ || hidden_.count(key) > 0; });
    check_open();
    if (!ok) {
      throw DeadlockError("pool_get timed out after " + std::to_string(timeout.count()) +
                          " ms waiting for hidden state " + key.str());
    }
    const auto t1 = Clock::now();
    Tensor<T> out = hidden_.at(key);
    ++gets_;
    const auto t2 = Clock::now();
    if (timing) {
      timing->blocked_us += micros_between(t0, t1);
      timing->transfer_us += micros_between(t1, t2);
    }
    return out;
  }

  void put_logits(int model, int step, Tensor<T> z) {
    {
      std::lock_guard lk(mu_);
      check_open();
      if (!logits_.emplace(std::pair{model, step}, std::move(z)).second) {
        throw ProtocolError("duplicate logits for model " + std::to_string(model) + " step " +
                            std::to_string(step));
      }
    }
    cv_.notify_all();
  }

  Tensor<T> take_logits(int model, int step, ms timeout) {
    std::unique_lock lk(mu_);
    const std::pair key{model, step};
    const bool ok = cv_.wait_for(lk, timeout, [&] { return aborted_ || logits_.count(key) > 0; });
    check_open();
    if (!ok) {
      throw DeadlockError("timed out after " + std::to_string(timeout.count()) +
                          " ms waiting for logits of model " + std::to_string(model) + " step " +
                          std::to_string(step));
    }
    auto node = logits_.extract(key);
    return std::move(node.mapped());
  }

  /// Token broadcast for the next step; nullopt tells workers to stop.
  void put_token(int step, std::optional<int> token) {
    {
      std::lock_guard lk(mu_);
      check_open();
      if (!tokens_.emplace(step, token).second) {
        throw ProtocolError("duplicate token broadcast for step " + std::to_string(step));
      }
    }
    cv_.notify_all();
  }

  std::optional<int> get_token(int step, ms timeout, double* blocked_us = nullptr) {
    const auto t0 = Clock::now();
    std::unique_lock lk(mu_);
    const bool ok = cv_.wait_until(lk, t0 + timeout, [&] { return aborted_ || tokens_.count(step) > 0; });
    check_open();
    if (!ok) {
      throw DeadlockError("timed out after " + std::to_string(timeout.count()) +
                          " ms waiting for the token of step " + std::to_string(step));
    }
    if (blocked_us) *blocked_us += micros_between(t0, Clock::now());
    return tokens_.at(step);
  }

  /// Drops every hidden state of `step`; returns how many were removed.
  std::size_t drain_step(int step) {
    std::lock_guard lk(mu_);
    std::size_t n = 0;
    for (auto it = hidden_.begin(); it != hidden_.end();) {
      if (it->first.step == step) {
        it = hidden_.erase(it);
        ++n;
      } else {
        ++it;
      }
    }
    return n;
  }

  void abort() {
    {
      std::lock_guard lk(mu_);
      aborted_ = true;
    }
    cv_.notify_all();
  }

  bool aborted() const {
    std::lock_guard lk(mu_);
    return aborted_;
  }

  std::size_t size() const {
    std::lock_guard lk(mu_);
    return hidden_.size() + logits_.size();
  }

  std::size_t puts() const {
    std::lock_guard lk(mu_);
    return puts_;
  }

  std::size_t gets() const {
    std::lock_guard lk(mu_);
    return gets_;
  }

  double put_us() const {
    std::lock_guard lk(mu_);
    return put_us_;
  }

 private:
  void check_open() const {
    if (aborted_) throw ProtocolError("state pool aborted");
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<HiddenKey, Tensor<T>> hidden_;
  std::map<std::pair<int, int>, Tensor<T>> logits_;
  std::map<int, std::optional<int>> tokens_;
  bool aborted_ = false;
  std::size_t puts_ = 0, gets_ = 0;
  double put_us_ = 0;
};

template <typename T>
void pool_put(StatePool<T>& pool, const HiddenKey& key, Tensor<T> value) {
  pool.put(key, std::move(value));
}

template <typename T>
Tensor<T> pool_get(StatePool<T>& pool, const HiddenKey& key, int timeout_ms) {
  return pool.get(key, std::chrono::milliseconds(timeout_ms));
}

struct LayerTiming {
  int model = 0;
  int layer = 0;  // 0 = embedding, L+1 = output head
  int step = 0;
  double start_us = 0;
  double finish_us = 0;
};

struct TimingReport {
  std::string mode;
  int workers = 1;
  double wall_us = 0;
  double blocked_us = 0;        // workers waiting on predecessor states
  double token_wait_us = 0;     // workers waiting on the per-step token barrier
  double state_passing_us = 0;  // pool writes plus post-wait reads (lock + copy)
  std::size_t states_passed = 0;
  std::vector<LayerTiming> layers;

  nlohmann::json to_json(bool with_layers = true) const {
    nlohmann::json j;
    j["mode"] = mode;
    j["workers"] = workers;
    j["wall_us"] = wall_us;
    j["blocked_us"] = blocked_us;
    j["token_wait_us"] = token_wait_us;
    j["state_passing_us"] = state_passing_us;
    j["states_passed"] = states_passed;
    if (with_layers) {
      auto arr = nlohmann::json::array();
      for (const auto& l : layers) {
        arr.push_back({{"model", l.model}, {"layer", l.layer}, {"step", l.step},
                       {"start_us", l.start_us}, {"finish_us", l.finish_us}});
      }
      j["layers"] = arr;
    }
    return j;
  }
};

template <typename T>
struct DecodeResult {
  std::vector<int> tokens;                // generated tokens, EOS included when emitted
  std::vector<Tensor<T>> fused_logits;    // one per generated token
  TimingReport timing;
};

/// Thrown when a pipelined decode cannot finish. Carries what was produced
/// so far and the original failure.
class DecodeAborted : public std::runtime_error {
 public:
  DecodeAborted(const std::string& what, std::vector<int> partial, TimingReport timing, std::exception_ptr cause)
      : std::runtime_error(what), partial_(std::move(partial)), timing_(std::move(timing)), cause_(cause) {}

  const std::vector<int>& partial_tokens() const { return partial_; }
  const TimingReport& timing() const { return timing_; }
  std::exception_ptr cause() const { return cause_; }

 private:
  std::vector<int> partial_;
  TimingReport timing_;
  std::exception_ptr cause_;
};

struct PipelineOptions {
  int workers = 0;          // executor threads; 0 = one per model
  int timeout_ms = 5000;    // per blocking read
  bool record_layers = true;
};

namespace detail {

template <typename T>
void check_decode_args(const Ensemble<T>& ens, const std::vector<int>& prompt, int max_tokens) {
  ens.validate();
  if (prompt.empty()) throw ContractError("decode: prompt must be nonempty");
  if (max_tokens < 0) throw ContractError("decode: max_tokens must be >= 0");
  const auto& s = ens.models.front().spec();
  for (int tok : prompt) {
    if (tok < 0 || tok >= s.vocab) throw RangeError("decode: prompt token " + std::to_string(tok) + " outside vocabulary");
  }
  // The last generated token is never fed back, so positions 0..m+max-2 are used.
  const std::size_t need = prompt.size() + static_cast<std::size_t>(std::max(max_tokens, 1)) - 1;
  if (need > static_cast<std::size_t>(s.max_steps)) {
    throw RangeError("decode: prompt length " + std::to_string(prompt.size()) + " plus " +
                     std::to_string(max_tokens) + " new tokens exceeds max_steps " + std::to_string(s.max_steps));
  }
}

inline int eos_token(int vocab) { return vocab - 1; }

}  // namespace detail

/// Reference decoder: per step m_0 runs to completion, then m_1 on m_0's
/// layer states, and so on; the fused logits pick the next token.
template <typename T>
DecodeResult<T> decode_sequential(const Ensemble<T>& ens, const std::vector<int>& prompt, int max_tokens) {
  detail::check_decode_args(ens, prompt, max_tokens);
  DecodeResult<T> res;
  res.timing.mode = "sequential";
  if (max_tokens == 0) return res;
  const auto t0 = Clock::now();
  const std::size_t n = ens.size();
  const int eos = detail::eos_token(ens.models.front().spec().vocab);
  std::vector<KvCache<T>> caches;
  for (const auto& m : ens.models) caches.push_back(m.new_cache());
  int token = prompt.front();
  for (std::size_t t = 0;; ++t) {
    std::vector<Tensor<T>> zs;
    std::vector<Tensor<T>> prev_states;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& m = ens.models[i];
      StepOutput<T> out;
      if (ens.fuses(i)) {
        FusionInputs<T> fin;
        for (int l = 1; l <= m.n_layers(); ++l) {
          if (m.spec().is_fusion_layer(l)) fin.emplace(l, prev_states.at(static_cast<std::size_t>(l - 1)));
        }
        out = m.forward_step(token, caches[i], &fin);
      } else {
        out = m.forward_step(token, caches[i]);
      }
      prev_states = std::move(out.layer_states);
      zs.push_back(std::move(out.logits));
    }
    if (t + 1 < prompt.size()) {
      token = prompt[t + 1];
      continue;
    }
    auto fused = fuse_logits(zs, ens.spec.lambdas, ens.spec.top_k);
    token = static_cast<int>(argmax<T>(fused.span()));
    res.tokens.push_back(token);
    res.fused_logits.push_back(std::move(fused));
    if (token == eos || static_cast<int>(res.tokens.size()) == max_tokens) break;
  }
  res.timing.wall_us = micros_between(t0, Clock::now());
  return res;
}

/// Layer-pipelined decoder. Model i is served by executor i % workers; an
/// executor runs its models in index order each step. A model at a fusion
/// layer blocks until its predecessor has published the state it needs, so
/// successors trail their predecessors by one layer instead of a full pass.
template <typename T>
DecodeResult<T> decode_pipelined(const Ensemble<T>& ens, const std::vector<int>& prompt, int max_tokens,
                                 const PipelineOptions& opt = {}) {
  detail::check_decode_args(ens, prompt, max_tokens);
  const int n = static_cast<int>(ens.size());
  const int workers = opt.workers <= 0 ? n : std::min(opt.workers, n);
  DecodeResult<T> res;
  res.timing.mode = "pipelined";
  res.timing.workers = workers;
  if (max_tokens == 0) return res;

  const auto timeout = std::chrono::milliseconds(opt.timeout_ms);
  const int eos = detail::eos_token(ens.models.front().spec().vocab);
  StatePool<T> pool;
  const auto t0 = Clock::now();

  struct ExecStats {
    GetTiming get;
    double token_wait_us = 0;
    std::vector<LayerTiming> layers;
    std::exception_ptr error;
  };
  std::vector<ExecStats> stats(static_cast<std::size_t>(workers));

  auto run_executor = [&](int e) {
    ExecStats& st = stats[static_cast<std::size_t>(e)];
    std::vector<int> mine;
    for (int i = e; i < n; i += workers) mine.push_back(i);
    std::vector<KvCache<T>> caches;
    for (int i : mine) caches.push_back(ens.models[static_cast<std::size_t>(i)].new_cache());
    auto stamp = [&](int i, int l, int t, Clock::time_point a, Clock::time_point b) {
      if (opt.record_layers) st.layers.push_back({i, l, t, micros_between(t0, a), micros_between(t0, b)});
    };
    try {
      for (int t = 0;; ++t) {
        int token;
        if (static_cast<std::size_t>(t) < prompt.size()) {
          token = prompt[static_cast<std::size_t>(t)];
        } else {
          const auto next = pool.get_token(t, timeout, &st.token_wait_us);
          if (!next) return;
          token = *next;
        }
        for (std::size_t k = 0; k < mine.size(); ++k) {
          const int i = mine[k];
          const auto& m = ens.models[static_cast<std::size_t>(i)];
          const bool fuses = ens.fuses(static_cast<std::size_t>(i));
          auto& cache = caches[k];
          const std::size_t d = m.d();
          Tensor<T> h({d}), next({d});
          auto a = Clock::now();
          m.embed(token, cache.len, h.span());
          auto b = Clock::now();
          stamp(i, 0, t, a, b);
          pool.put({i, 0, t}, h);
          for (int l = 1; l <= m.n_layers(); ++l) {
            Tensor<T> pred;
            if (fuses && m.spec().is_fusion_layer(l)) pred = pool.get({i - 1, l - 1, t}, timeout, &st.get);
            a = Clock::now();
            m.layer_step(l, h.span(), pred.span(), cache, next.span());
            b = Clock::now();
            stamp(i, l, t, a, b);
            std::swap(h, next);
            pool.put({i, l, t}, h);
          }
          Tensor<T> z({static_cast<std::size_t>(m.spec().vocab)});
          a = Clock::now();
          m.head(h.span(), cache, z.span());
          b = Clock::now();
          stamp(i, m.n_layers() + 1, t, a, b);
          pool.put_logits(i, t, std::move(z));
        }
      }
    } catch (...) {
      if (!pool.aborted()) st.error = std::current_exception();
      pool.abort();
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(workers));
  for (int e = 0; e < workers; ++e) threads.emplace_back(run_executor, e);

  std::exception_ptr coord_error;
  try {
    for (int t = 0;; ++t) {
      std::vector<Tensor<T>> zs;
      for (int i = 0; i < n; ++i) zs.push_back(pool.take_logits(i, t, timeout));
      pool.drain_step(t);
      if (static_cast<std::size_t>(t) + 1 < prompt.size()) continue;
      auto fused = fuse_logits(zs, ens.spec.lambdas, ens.spec.top_k);
      const int tok = static_cast<int>(argmax<T>(fused.span()));
      res.tokens.push_back(tok);
      res.fused_logits.push_back(std::move(fused));
      if (tok == eos || static_cast<int>(res.tokens.size()) == max_tokens) {
        pool.put_token(t + 1, std::nullopt);
        break;
      }
      pool.put_token(t + 1, tok);
    }
  } catch (...) {
    coord_error = std::current_exception();
    pool.abort();
  }
  for (auto& th : threads) th.join();

  auto& tr = res.timing;
  tr.wall_us = micros_between(t0, Clock::now());
  for (auto& st : stats) {
    tr.blocked_us += st.get.blocked_us;
    tr.token_wait_us += st.token_wait_us;
    tr.state_passing_us += st.get.transfer_us;
    tr.layers.insert(tr.layers.end(), st.layers.begin(), st.layers.end());
  }
  tr.state_passing_us += pool.put_us();
  tr.states_passed = pool.gets();
  std::sort(tr.layers.begin(), tr.layers.end(), [](const LayerTiming& a, const LayerTiming& b) {
    return std::tie(a.step, a.model, a.layer) < std::tie(b.step, b.model, b.layer);
  });

  std::exception_ptr cause;
  for (auto& st : stats) {
    if (st.error) {
      cause = st.error;
      break;
    }
  }
  if (!cause) cause = coord_error;
  if (cause) {
    std::string why;
    try {
      std::rethrow_exception(cause);
    } catch (const std::exception& e) {
      why = e.what();
    } catch (...) {
      why = "unknown error";
    }
    throw DecodeAborted("pipelined decode aborted after " + std::to_string(res.tokens.size()) + " tokens: " + why,
                        res.tokens, tr, cause);
  }
  if (pool.size() != 0) throw ProtocolError("state pool not drained at end of decode");
  return res;
}

}  // namespace llmboost
