#pragma once

// Numerical probes for the ensemble theory: the effective contribution of a
// corrector in probability space, the quadratic softmax remainder, the MSE
// change under a lambda-weighted corrector, and guaranteed descent of CE
// under the composite objective.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "llmboost/errors.hpp"
#include "llmboost/numkit.hpp"
#include "llmboost/training.hpp"

namespace llmboost {

/// g = J_softmax(z_prev) z_new.
inline Tensor<double> effective_contribution(const Tensor<double>& z_prev, const Tensor<double>& z_new) {
  if (z_prev.rank() != 1 || z_new.rank() != 1 || z_prev.size() != z_new.size()) {
    throw ShapeError("effective_contribution: expected two vectors of equal length");
  }
  // J z = p * (z - <p, z>) without forming J.
  const auto p = softmax(z_prev);
  const double pz = dot<double>(p.span(), z_new.span());
  Tensor<double> g({p.size()});
  for (std::size_t i = 0; i < p.size(); ++i) g[i] = p[i] * (z_new[i] - pz);
  return g;
}

/// softmax(z + dz) - softmax(z) - J(z) dz.
inline Tensor<double> softmax_remainder(const Tensor<double>& z, const Tensor<double>& dz) {
  Tensor<double> zd = z;
  for (std::size_t i = 0; i < z.size(); ++i) zd[i] += dz[i];
  const auto a = softmax(zd), b = softmax(z);
  const auto lin = effective_contribution(z, dz);
  Tensor<double> r({z.size()});
  for (std::size_t i = 0; i < z.size(); ++i) r[i] = a[i] - b[i] - lin[i];
  return r;
}

struct LineFit {
  double slope = 0;
  double intercept = 0;
  double max_residual = 0;  // largest (y - fit), may be negative
};

/// Ordinary least squares of y on x.
inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("fit_line: need at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0)) throw ContractError("fit_line: x values are all equal");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.max_residual = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < x.size(); ++i) f.max_residual = std::max(f.max_residual, y[i] - (f.intercept + f.slope * x[i]));
  return f;
}

inline std::vector<double> log_spaced(double lo, double hi, int count) {
  if (count < 2 || !(lo > 0) || !(hi > lo)) throw ContractError("log_spaced: need 0 < lo < hi and count >= 2");
  std::vector<double> out;
  for (int i = 0; i < count; ++i) out.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / (count - 1)));
  return out;
}

struct RemainderSample {
  double scale = 0;  // |dz|
  double norm = 0;   // |R(dz)|
};

/// Global bound on |R(dz)| / |dz|^2. For a unit direction v,
/// D^2 p_i[v, v] = p_i ((v_i - pv)^2 - Var_p(v)), so |D^2 p[v, v]| <= 4 |p| <= 4
/// and the integral form of the remainder gives |R| <= 2 |dz|^2.
inline constexpr double kSoftmaxRemainderBound = 2.0;

struct RemainderReport {
  double exponent = 0;  // free log-log slope
  double c_fit = 0;     // tightest C with |R| <= C s^2 over the samples
  bool envelope_ok = true;  // every sample under c_fit s^2 and c_fit within the global bound
  std::vector<RemainderSample> samples;
};

/// Fits log|R(s d)| against log s over random unit directions d. The slope
/// is fitted freely; C comes from the fit with the exponent pinned at 2
/// (intercept plus largest residual).
inline RemainderReport remainder_probe(const Tensor<double>& z, const std::vector<double>& scales, int directions,
                                       std::uint64_t seed) {
  if (z.rank() != 1) throw ShapeError("remainder_probe: z must be a vector");
  if (scales.size() < 3) throw ContractError("remainder_probe: degenerate fit, need at least 3 scales");
  const auto [lo, hi] = std::minmax_element(scales.begin(), scales.end());
  if (!(*lo > 0) || *hi / *lo < 100.0 * (1 - 1e-12)) throw ContractError("remainder_probe: scales must span at least 2 decades");
  if (directions < 1) throw ContractError("remainder_probe: directions must be >= 1");
  std::mt19937_64 rng(seed);
  RemainderReport rep;
  std::vector<double> lx, ly;
  for (int k = 0; k < directions; ++k) {
    auto d = random_normal<double>({z.size()}, rng, 1.0);
    const double nd = l2_norm<double>(d.span());
    for (auto& v : d.data()) v /= nd;
    for (double s : scales) {
      Tensor<double> dz = d;
      for (auto& v : dz.data()) v *= s;
      const double r = l2_norm<double>(softmax_remainder(z, dz).span());
      rep.samples.push_back({s, r});
      if (r > 0) {
        lx.push_back(std::log(s));
        ly.push_back(std::log(r));
      }
    }
  }
  rep.exponent = fit_line(lx, ly).slope;
  double icpt = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) icpt += (ly[i] - 2 * lx[i]) / static_cast<double>(lx.size());
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < lx.size(); ++i) worst = std::max(worst, ly[i] - 2 * lx[i] - icpt);
  rep.c_fit = std::exp(icpt + worst);
  for (const auto& smp : rep.samples) {
    // Relative slack for the rounding in exp/log.
    if (smp.norm > rep.c_fit * smp.scale * smp.scale * (1 + 1e-12)) rep.envelope_ok = false;
  }
  if (!(rep.c_fit <= kSoftmaxRemainderBound)) rep.envelope_ok = false;
  return rep;
}

// ---------------------------------------------------------------------------
// MSE sweep.

struct MseInstance {
  Tensor<double> z_prev;  // accumulated predecessor logits
  Tensor<double> z_new;   // corrector logits
  int gold = 0;
};

struct MseSweepReport {
  std::vector<double> lambdas;
  double mse_prev = 0;                      // mean over instances and dimensions
  std::vector<double> mse_prev_dim;         // per vocabulary dimension
  std::vector<double> delta_mse;            // per lambda, aggregated
  std::vector<std::vector<double>> delta_mse_dim;  // [lambda][v]
  std::vector<double> linear;               // -2 lambda mean(e.g)
  std::vector<double> residual;             // delta_mse - linear
  double mean_eg = 0;
  bool has_working_range = false;           // some lambda has delta_mse < 0
  double working_lo = 0, working_hi = 0;    // smallest / largest such lambda
  double residual_slope = 0;                // log|residual| vs log lambda

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(17) << "lambda,delta_mse,linear_prediction,residual\n";
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
      os << lambdas[i] << ',' << delta_mse[i] << ',' << linear[i] << ',' << residual[i] << '\n';
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mse_prev"] = mse_prev;
    j["mean_eg"] = mean_eg;
    j["has_working_range"] = has_working_range;
    if (has_working_range) j["working_range"] = {working_lo, working_hi};
    j["residual_slope"] = residual_slope;
    return j;
  }
};

/// One instance per labelled position: z_prev is the fused logit vector of
/// every member but the last, z_new the last member's raw logits.
template <typename T>
std::vector<MseInstance> mse_instances(const Ensemble<T>& ens, const Dataset& data) {
  if (ens.size() < 2) throw ContractError("mse_instances: need at least one successor");
  const std::size_t n = ens.size() - 1;
  const std::vector<double> lambdas(ens.spec.lambdas.begin(), ens.spec.lambdas.begin() + static_cast<std::ptrdiff_t>(n - 1));
  std::vector<MseInstance> out;
  for (const auto& ex : data) {
    const auto traces = ens.teacher_traces(ex.input);
    for (std::size_t t = 0; t < ex.input.size(); ++t) {
      if (ex.gold[t] == kNoLabel) continue;
      std::vector<Tensor<T>> zs;
      for (std::size_t i = 0; i < n; ++i) zs.push_back(traces[i].logits[t]);
      const auto zp = fuse_logits(zs, lambdas, ens.spec.top_k);
      MseInstance m;
      m.z_prev = Tensor<double>({zp.size()});
      m.z_new = Tensor<double>({zp.size()});
      for (std::size_t v = 0; v < zp.size(); ++v) {
        m.z_prev[v] = static_cast<double>(zp[v]);
        m.z_new[v] = static_cast<double>(traces[n].logits[t][v]);
      }
      m.gold = ex.gold[t];
      out.push_back(std::move(m));
    }
  }
  return out;
}

inline MseSweepReport mse_sweep(const std::vector<MseInstance>& data, const std::vector<double>& lambdas) {
  if (data.empty()) throw ContractError("mse_sweep: empty instance set");
  if (lambdas.empty()) throw ContractError("mse_sweep: empty lambda grid");
  for (double l : lambdas) {
    if (!(l > 0)) throw ContractError("mse_sweep: lambdas must be positive");
  }
  const std::size_t V = data.front().z_prev.size();
  for (const auto& d : data) {
    if (d.z_prev.size() != V || d.z_new.size() != V) throw ShapeError("mse_sweep: inconsistent vocabulary sizes");
    if (d.gold < 0 || static_cast<std::size_t>(d.gold) >= V) throw RangeError("mse_sweep: gold id out of range");
  }
  const double n = static_cast<double>(data.size());
  MseSweepReport rep;
  rep.lambdas = lambdas;
  rep.mse_prev_dim.assign(V, 0.0);
  double eg = 0;
  std::vector<Tensor<double>> p_prev;
  for (const auto& d : data) {
    const auto p = softmax(d.z_prev);
    const auto g = effective_contribution(d.z_prev, d.z_new);
    for (std::size_t v = 0; v < V; ++v) {
      const double y = v == static_cast<std::size_t>(d.gold) ? 1.0 : 0.0;
      rep.mse_prev_dim[v] += (p[v] - y) * (p[v] - y) / n;
      eg += (y - p[v]) * g[v];
    }
    p_prev.push_back(p);
  }
  rep.mean_eg = eg / (n * static_cast<double>(V));
  for (double m : rep.mse_prev_dim) rep.mse_prev += m / static_cast<double>(V);

  for (double lam : lambdas) {
    std::vector<double> dim(V, 0.0);
    for (std::size_t k = 0; k < data.size(); ++k) {
      const auto& d = data[k];
      Tensor<double> z = d.z_prev;
      for (std::size_t v = 0; v < V; ++v) z[v] += lam * d.z_new[v];
      const auto p = softmax(z);
      for (std::size_t v = 0; v < V; ++v) {
        const double y = v == static_cast<std::size_t>(d.gold) ? 1.0 : 0.0;
        // Difference of squares keeps small changes from cancelling away.
        dim[v] += (p[v] - p_prev[k][v]) * (p[v] + p_prev[k][v] - 2 * y) / n;
      }
    }
    double agg = 0;
    for (double x : dim) agg += x / static_cast<double>(V);
    rep.delta_mse_dim.push_back(dim);
    rep.delta_mse.push_back(agg);
    rep.linear.push_back(-2.0 * lam * rep.mean_eg);
    rep.residual.push_back(agg - rep.linear.back());
    if (agg < 0) {
      if (!rep.has_working_range) rep.working_lo = lam;
      rep.has_working_range = true;
      rep.working_lo = std::min(rep.working_lo, lam);
      rep.working_hi = std::max(rep.working_hi, lam);
    }
  }
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (std::abs(rep.residual[i]) > 0) {
      lx.push_back(std::log(lambdas[i]));
      ly.push_back(std::log(std::abs(rep.residual[i])));
    }
  }
  if (lx.size() >= 2) rep.residual_slope = fit_line(lx, ly).slope;
  return rep;
}

// ---------------------------------------------------------------------------
// Guaranteed-descent probe.

/// Full-batch objective over the trainable parameters of one model.
template <typename T>
class FlatObjective {
 public:
  FlatObjective(const Model<T>& model, const std::vector<ChainSample<T>>& samples, double beta)
      : spec_(model.spec()), base_(model.weights()), beta_(beta) {
    for (const auto& s : samples) batch_.push_back(&s);
    if (batch_.empty()) throw ContractError("descent probe: empty dataset");
  }

  struct Eval {
    double ce = 0;
    double supp = 0;
    std::vector<T> g_ce;
    std::vector<T> g_s;
    std::size_t active_errors = 0;
  };

  std::vector<T> params() const {
    Model<T> m(spec_, base_);
    return flatten_trainable(m, base_);
  }

  Model<T> model_at(const std::vector<T>& x) const {
    Weights<T> w = base_;
    assign_trainable<T>(spec_, w, x);
    return Model<T>(spec_, std::move(w));
  }

  Eval eval(const std::vector<T>& x, bool with_supp = true) const {
    const Model<T> m = model_at(x);
    Eval e;
    Weights<T> gce = zeros_like(m.weights());
    const auto l = batch_loss_grad(m, batch_, LossWeights{1.0, 0.0, beta_}, &gce);
    e.ce = static_cast<double>(l.ce);
    e.supp = static_cast<double>(l.supp);
    e.active_errors = l.active_errors;
    e.g_ce = flatten_trainable(m, gce);
    if (with_supp) {
      Weights<T> gs = zeros_like(m.weights());
      batch_loss_grad(m, batch_, LossWeights{0.0, 1.0, beta_}, &gs);
      e.g_s = flatten_trainable(m, gs);
    }
    return e;
  }

  /// Largest |eigenvalue| of the CE Hessian at x by power iteration on
  /// central-difference Hessian-vector products.
  double curvature(const std::vector<T>& x, int iters, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<T> v(x.size());
    for (auto& a : v) a = static_cast<T>(nd(rng));
    normalize(v);
    double lam = 0;
    const T h = static_cast<T>(1e-4);
    for (int it = 0; it < iters; ++it) {
      std::vector<T> xp = x, xm = x;
      for (std::size_t i = 0; i < x.size(); ++i) {
        xp[i] += h * v[i];
        xm[i] -= h * v[i];
      }
      const auto gp = eval(xp, false).g_ce, gm = eval(xm, false).g_ce;
      std::vector<T> hv(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) hv[i] = (gp[i] - gm[i]) / (2 * h);
      lam = static_cast<double>(l2_norm<T>(hv));
      if (!(lam > 0)) break;
      v = std::move(hv);
      normalize(v);
    }
    return lam;
  }

 private:
  static void normalize(std::vector<T>& v) {
    const T n = l2_norm<T>(v);
    if (n > 0) {
      for (auto& a : v) a /= n;
    }
  }

  ModelSpec spec_;
  Weights<T> base_;
  std::vector<const ChainSample<T>*> batch_;
  double beta_;
};

struct DescentConfig {
  double alpha = 0.9;
  double beta = 0.1;
  int steps = 200;
  double eta_factor = 0.9;          // eta = eta_factor * eta*
  std::optional<double> eta_override;  // run with this step instead (no assertion implied)
  int pilot_steps = 200;            // trajectory used to measure the constants
  int curvature_every = 25;
  int power_iters = 12;
  std::uint64_t seed = 1;
};

struct DescentReport {
  bool precondition_ok = false;
  std::string precondition_message;
  double rho = 0, gamma = 0, l_smooth = 0;
  double eta_star = 0;
  double eta = 0;
  std::vector<double> ce;  // steps + 1 values
  int violations = 0;
  // Constants observed along the final run, for comparison with the ones used.
  double run_rho = 0, run_gamma = 0, run_secant = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["precondition_ok"] = precondition_ok;
    if (!precondition_ok) j["precondition_message"] = precondition_message;
    j["rho"] = rho;
    j["gamma"] = gamma;
    j["L"] = l_smooth;
    j["eta_star"] = eta_star;
    j["eta"] = eta;
    j["steps"] = ce.empty() ? 0 : ce.size() - 1;
    j["violations"] = violations;
    j["ce_first"] = ce.empty() ? 0.0 : ce.front();
    j["ce_last"] = ce.empty() ? 0.0 : ce.back();
    j["run_rho"] = run_rho;
    j["run_gamma"] = run_gamma;
    j["run_secant"] = run_secant;
    return j;
  }
};

namespace detail {

template <typename T>
void track_alignment(const std::vector<T>& gs, const std::vector<T>& gce, double& rho, double& gamma) {
  const auto a = alignment_from_pairs<T>({{gs, gce}});
  rho = std::max(rho, a.rho);
  gamma = std::max(gamma, a.gamma);
}

template <typename T>
double secant(const std::vector<T>& x0, const std::vector<T>& x1, const std::vector<T>& g0, const std::vector<T>& g1) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    num += static_cast<double>((g1[i] - g0[i]) * (g1[i] - g0[i]));
    den += static_cast<double>((x1[i] - x0[i]) * (x1[i] - x0[i]));
  }
  return den > 0 ? std::sqrt(num / den) : 0.0;
}

}  // namespace detail

/// Full-batch descent on alpha CE + suppression with a step derived from
/// measured (rho, Gamma, L). The constants are the maxima over a pilot
/// trajectory: alignment at every step, Hessian power iteration at regular
/// checkpoints and secant ratios between consecutive iterates. The final run
/// restarts from the initial point and counts steps where CE fails to
/// strictly decrease.
template <typename T>
DescentReport descent_probe(const Model<T>& model, const std::vector<ChainSample<T>>& samples,
                            const DescentConfig& cfg) {
  if (!(cfg.alpha > 0) || !(cfg.beta > 0) || cfg.steps < 1) throw ContractError("descent_probe: invalid config");
  const FlatObjective<T> obj(model, samples, cfg.beta);
  const std::vector<T> x0 = obj.params();
  DescentReport rep;
  const T a = static_cast<T>(cfg.alpha);

  auto direction = [&](const typename FlatObjective<T>::Eval& e) {
    std::vector<T> d(e.g_ce.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a * e.g_ce[i] + e.g_s[i];
    return d;
  };

  // Initial constants.
  auto e = obj.eval(x0);
  detail::track_alignment(e.g_s, e.g_ce, rep.rho, rep.gamma);
  rep.l_smooth = obj.curvature(x0, cfg.power_iters, cfg.seed);
  auto bound = [&]() -> bool {
    if (!(cfg.alpha > rep.rho * rep.gamma)) {
      std::ostringstream os;
      os << "alpha=" << cfg.alpha << " <= rho*Gamma=" << rep.rho * rep.gamma << "; descent guarantee does not apply";
      rep.precondition_ok = false;
      rep.precondition_message = os.str();
      return false;
    }
    rep.eta_star = descent_lr_bound(cfg.alpha, rep.rho, rep.gamma, rep.l_smooth);
    rep.precondition_ok = true;
    return true;
  };
  if (!bound()) return rep;

  // Pilot trajectory.
  std::vector<T> x = x0;
  for (int k = 0; k < cfg.pilot_steps; ++k) {
    const double eta = cfg.eta_factor * rep.eta_star;
    const auto d = direction(e);
    std::vector<T> xn = x;
    for (std::size_t i = 0; i < x.size(); ++i) xn[i] -= static_cast<T>(eta) * d[i];
    auto en = obj.eval(xn);
    rep.l_smooth = std::max(rep.l_smooth, detail::secant(x, xn, e.g_ce, en.g_ce));
    detail::track_alignment(en.g_s, en.g_ce, rep.rho, rep.gamma);
    if (cfg.curvature_every > 0 && (k + 1) % cfg.curvature_every == 0) {
      rep.l_smooth = std::max(rep.l_smooth, obj.curvature(xn, cfg.power_iters, cfg.seed + static_cast<std::uint64_t>(k)));
    }
    x = std::move(xn);
    e = std::move(en);
    if (!bound()) return rep;
  }

  rep.eta = cfg.eta_override ? *cfg.eta_override : cfg.eta_factor * rep.eta_star;
  x = x0;
  e = obj.eval(x);
  rep.ce.push_back(e.ce);
  for (int k = 0; k < cfg.steps; ++k) {
    detail::track_alignment(e.g_s, e.g_ce, rep.run_rho, rep.run_gamma);
    const auto d = direction(e);
    std::vector<T> xn = x;
    for (std::size_t i = 0; i < x.size(); ++i) xn[i] -= static_cast<T>(rep.eta) * d[i];
    auto en = obj.eval(xn);
    rep.run_secant = std::max(rep.run_secant, detail::secant(x, xn, e.g_ce, en.g_ce));
    if (!(en.ce < e.ce)) ++rep.violations;
    rep.ce.push_back(en.ce);
    x = std::move(xn);
    e = std::move(en);
  }
  return rep;
}

}  // namespace llmboost
