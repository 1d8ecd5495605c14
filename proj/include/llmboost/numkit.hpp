#pragma once

// Minimal dense numeric kernel: row-major tensors, softmax and its Jacobian,
// layer normalization, and a central-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "llmboost/errors.hpp"

namespace llmboost {

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape product " + std::to_string(count(shape_)));
    }
  }

  static Tensor vector(std::vector<T> values) {
    std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return vector(std::vector<T>(values));
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape), T(0)); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * shape_[1], shape_[1]); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * shape_[1], shape_[1]);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ']';
    return os.str();
  }

 private:
  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

namespace detail {

template <typename T>
void require_vector(const Tensor<T>& t, const char* what) {
  if (t.rank() != 1) {
    throw ShapeError(std::string(what) + ": expected a 1-D tensor, got shape " + t.shape_string());
  }
}

template <typename T>
void require_same_length(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": length mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Span-level kernels. The model code runs on raw row-major buffers; the
// tensor-level API below wraps these.

// y = x W  (x: [n], W: [n, m], y: [m]); y is overwritten.
template <typename T>
void vec_mat(std::span<const T> x, const T* w, std::size_t n, std::size_t m, std::span<T> y) {
  std::fill(y.begin(), y.end(), T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const T xi = x[i];
    const T* wr = w + i * m;
    for (std::size_t j = 0; j < m; ++j) y[j] += xi * wr[j];
  }
}

// y += x W
template <typename T>
void vec_mat_acc(std::span<const T> x, const T* w, std::size_t n, std::size_t m, std::span<T> y) {
  for (std::size_t i = 0; i < n; ++i) {
    const T xi = x[i];
    const T* wr = w + i * m;
    for (std::size_t j = 0; j < m; ++j) y[j] += xi * wr[j];
  }
}

// dx += W dy  (backward of y = x W w.r.t. x)
template <typename T>
void mat_vec_acc(const T* w, std::size_t n, std::size_t m, std::span<const T> dy, std::span<T> dx) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* wr = w + i * m;
    T s = 0;
    for (std::size_t j = 0; j < m; ++j) s += wr[j] * dy[j];
    dx[i] += s;
  }
}

// dW += x^T dy  (outer product accumulation)
template <typename T>
void outer_acc(std::span<const T> x, std::span<const T> dy, T* dw) {
  const std::size_t m = dy.size();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T xi = x[i];
    if (xi == T(0)) continue;
    T* r = dw + i * m;
    for (std::size_t j = 0; j < m; ++j) r[j] += xi * dy[j];
  }
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void softmax_inplace(std::span<T> z) {
  const T mx = *std::max_element(z.begin(), z.end());
  T sum = 0;
  for (auto& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : z) v /= sum;
}

// Normalized activations and inverse std of a layer norm, kept for backward.
template <typename T>
struct NormStats {
  T mean = 0;
  T inv_std = 0;
};

template <typename T>
NormStats<T> layer_norm_span(std::span<const T> x, std::span<const T> gain, std::span<const T> bias,
                             T eps, std::span<T> out, std::span<T> normed) {
  const std::size_t d = x.size();
  T mean = 0;
  for (T v : x) mean += v;
  mean /= T(d);
  T var = 0;
  for (T v : x) var += (v - mean) * (v - mean);
  var /= T(d);
  const T inv_std = T(1) / std::sqrt(var + eps);
  for (std::size_t i = 0; i < d; ++i) {
    const T n = (x[i] - mean) * inv_std;
    normed[i] = n;
    out[i] = (gain.empty() ? n : gain[i] * n) + (bias.empty() ? T(0) : bias[i]);
  }
  return {mean, inv_std};
}

// Backward of out = gain * normed + bias. Accumulates into dx, dgain, dbias
// (dgain/dbias may be empty when the norm has no parameters).
template <typename T>
void layer_norm_backward(std::span<const T> dout, std::span<const T> normed, T inv_std,
                         std::span<const T> gain, std::span<T> dx, std::span<T> dgain,
                         std::span<T> dbias) {
  const std::size_t d = dout.size();
  T mean_dn = 0;
  T mean_dn_n = 0;
  std::vector<T> dn(d);
  for (std::size_t i = 0; i < d; ++i) {
    dn[i] = gain.empty() ? dout[i] : dout[i] * gain[i];
    mean_dn += dn[i];
    mean_dn_n += dn[i] * normed[i];
    if (!dgain.empty()) dgain[i] += dout[i] * normed[i];
    if (!dbias.empty()) dbias[i] += dout[i];
  }
  mean_dn /= T(d);
  mean_dn_n /= T(d);
  for (std::size_t i = 0; i < d; ++i) dx[i] += inv_std * (dn[i] - mean_dn - normed[i] * mean_dn_n);
}

// ---------------------------------------------------------------------------
// Tensor-level operations.

template <typename T>
Tensor<T> softmax(const Tensor<T>& z) {
  detail::require_vector(z, "softmax");
  Tensor<T> p = z;
  if (!p.empty()) softmax_inplace(p.span());
  return p;
}

/// J = diag(p) - p p^T with p = softmax(z).
template <typename T>
Tensor<T> softmax_jacobian(const Tensor<T>& z) {
  detail::require_vector(z, "softmax_jacobian");
  const Tensor<T> p = softmax(z);
  const std::size_t v = p.size();
  Tensor<T> j({v, v});
  for (std::size_t a = 0; a < v; ++a) {
    for (std::size_t b = 0; b < v; ++b) j(a, b) = (a == b ? p[a] : T(0)) - p[a] * p[b];
  }
  return j;
}

template <typename T>
Tensor<T> mat_vec(const Tensor<T>& m, const Tensor<T>& x) {
  if (m.rank() != 2 || x.rank() != 1 || m.cols() != x.size()) {
    throw ShapeError("mat_vec: " + m.shape_string() + " x " + x.shape_string());
  }
  Tensor<T> y({m.rows()});
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot<T>(m.row(r), x.span());
  return y;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  Tensor<T> c({a.rows(), b.cols()});
  for (std::size_t r = 0; r < a.rows(); ++r) vec_mat_acc<T>(a.row(r), b.ptr(), b.rows(), b.cols(), c.row(r));
  return c;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& h, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  detail::require_vector(h, "layer_norm");
  if (h.empty()) throw ShapeError("layer_norm: d must be >= 1");
  detail::require_same_length(h, gain, "layer_norm gain");
  detail::require_same_length(h, bias, "layer_norm bias");
  Tensor<T> out({h.size()});
  std::vector<T> normed(h.size());
  layer_norm_span<T>(h.span(), gain.span(), bias.span(), eps, out.span(), normed);
  return out;
}

/// Unit-gain, zero-bias layer norm.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& h, T eps = T(1e-5)) {
  detail::require_vector(h, "layer_norm");
  if (h.empty()) throw ShapeError("layer_norm: d must be >= 1");
  Tensor<T> out({h.size()});
  std::vector<T> normed(h.size());
  layer_norm_span<T>(h.span(), {}, {}, eps, out.span(), normed);
  return out;
}

/// Central-difference gradient of a scalar function. A non-finite evaluation
/// is reported as a gradient-check failure.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, T eps) {
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T up = f(static_cast<const Tensor<T>&>(probe));
    probe[i] = orig - eps;
    const T down = f(static_cast<const Tensor<T>&>(probe));
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw RangeError("finite_diff_grad: non-finite function value at coordinate " +
                       std::to_string(i));
    }
    g[i] = (up - down) / (T(2) * eps);
  }
  return g;
}

template <typename T>
std::size_t argmax(std::span<const T> z) {
  // lowest index wins ties
  std::size_t best = 0;
  for (std::size_t i = 1; i < z.size(); ++i)
    if (z[i] > z[best]) best = i;
  return best;
}

template <typename T>
T l2_norm(std::span<const T> v) {
  return std::sqrt(dot(v, v));
}

template <typename T>
T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// -log(sigmoid(x)) without overflow.
template <typename T>
T neg_log_sigmoid(T x) {
  if (x >= 0) return std::log1p(std::exp(-x));
  return -x + std::log1p(std::exp(x));
}

template <typename T>
Tensor<T> random_normal(std::vector<std::size_t> shape, std::mt19937_64& rng, T stddev) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace llmboost
