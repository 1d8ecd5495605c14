#pragma once

// Latency model for layer-pipelined ensembles: the k x l task grid (model,
// layer) where task (m, i) needs (m-1, i) and (m, i-1). Tasks on the same
// anti-diagonal are independent and run on g processors.
//
// Times are kept as integer multiples of the per-layer cost c so the closed
// form and the simulator can be compared exactly.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "llmboost/errors.hpp"

namespace llmboost {

struct SchedProblem {
  int k = 1;  // models
  int l = 1;  // layers per model
  int g = 1;  // processors
  double c = 1.0;
  double delta = 0.0;

  int w() const { return std::min(k, l); }
  int u() const { return std::max(k, l); }

  void validate() const {
    if (k < 1 || l < 1 || g < 1) throw ContractError("SchedProblem: k, l and g must be >= 1");
    if (!(c > 0)) throw ContractError("SchedProblem: c must be positive");
    if (!(delta >= 0)) throw ContractError("SchedProblem: delta must be >= 0");
  }
};

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

/// Number of grid cells (m, i) with m + i = s.
inline int antidiagonal_width(int k, int l, int s) {
  if (k < 1 || l < 1) throw ContractError("antidiagonal_width: k and l must be >= 1");
  if (s < 2 || s > k + l) {
    throw RangeError("antidiagonal_width: s=" + std::to_string(s) + " outside [2, " + std::to_string(k + l) + "]");
  }
  return std::min(k, s - 1) - std::max(1, s - l) + 1;
}

inline double t_sequential(int n_successors, int n_layers, double c) {
  if (n_successors < 0 || n_layers < 1 || !(c > 0)) throw ContractError("t_sequential: invalid arguments");
  return static_cast<double>(n_successors + 1) * n_layers * c;
}

/// Closed form in units of c, without delta:
/// 2 sum_{t=1}^{w-1} ceil(t/g) + (u-w+1) ceil(w/g).
inline std::int64_t t_parallel_units(const SchedProblem& p) {
  p.validate();
  const std::int64_t w = p.w(), u = p.u(), g = p.g;
  std::int64_t ramp = 0;
  for (std::int64_t t = 1; t <= w - 1; ++t) ramp += ceil_div(t, g);
  return 2 * ramp + (u - w + 1) * ceil_div(w, g);
}

inline double t_parallel_closed(const SchedProblem& p) {
  return static_cast<double>(t_parallel_units(p)) * p.c + p.delta;
}

struct ScheduledTask {
  int model = 0;      // 1-based
  int layer = 0;      // 1-based
  int processor = 0;  // 0-based
  std::int64_t start = 0;   // units of c
  std::int64_t finish = 0;
};

struct Schedule {
  std::int64_t makespan_units = 0;
  double makespan = 0;  // makespan_units * c + delta
  std::vector<ScheduledTask> tasks;
};

/// List scheduling over the grid. Diagonals are visited in order; within a
/// diagonal tasks go to processors round-robin starting at 0, and each task
/// starts once its two predecessors and its processor are free.
inline Schedule simulate_schedule(const SchedProblem& p) {
  p.validate();
  Schedule out;
  std::vector<std::int64_t> finish(static_cast<std::size_t>((p.k + 1) * (p.l + 1)), 0);
  auto at = [&](int m, int i) -> std::int64_t& { return finish[static_cast<std::size_t>(m * (p.l + 1) + i)]; };
  std::vector<std::int64_t> proc_free(static_cast<std::size_t>(p.g), 0);
  for (int s = 2; s <= p.k + p.l; ++s) {
    int slot = 0;
    for (int m = std::max(1, s - p.l); m <= std::min(p.k, s - 1); ++m) {
      const int i = s - m;
      const int proc = slot++ % p.g;
      const std::int64_t ready = std::max(at(m - 1, i), at(m, i - 1));
      const std::int64_t start = std::max(ready, proc_free[static_cast<std::size_t>(proc)]);
      const std::int64_t end = start + 1;
      at(m, i) = end;
      proc_free[static_cast<std::size_t>(proc)] = end;
      out.tasks.push_back({m, i, proc, start, end});
      out.makespan_units = std::max(out.makespan_units, end);
    }
  }
  out.makespan = static_cast<double>(out.makespan_units) * p.c + p.delta;
  return out;
}

struct SpeedupRow {
  int k = 0, l = 0, g = 0;
  double t_seq = 0;
  double t_par_closed = 0;
  double t_par_sim = 0;
  double speedup = 0;  // t_seq / t_par_closed
  bool agree = true;   // closed form == simulation (exact, in units of c)
};

struct IntRange {
  int lo = 1, hi = 1;
};

struct SweepSpec {
  IntRange k{1, 6}, l{1, 12}, g{1, 4};
  double c = 1.0;
  double delta = 0.0;
};

inline std::vector<SpeedupRow> speedup_table(const SweepSpec& sw) {
  for (const auto* r : {&sw.k, &sw.l, &sw.g}) {
    if (r->lo < 1 || r->hi < r->lo) throw ContractError("speedup_table: empty or invalid range");
  }
  std::vector<SpeedupRow> rows;
  for (int k = sw.k.lo; k <= sw.k.hi; ++k) {
    for (int l = sw.l.lo; l <= sw.l.hi; ++l) {
      for (int g = sw.g.lo; g <= sw.g.hi; ++g) {
        const SchedProblem p{k, l, g, sw.c, sw.delta};
        SpeedupRow r{k, l, g};
        r.t_seq = t_sequential(k - 1, l, sw.c);
        const auto units = t_parallel_units(p);
        r.t_par_closed = t_parallel_closed(p);
        const auto sim = simulate_schedule(p);
        r.t_par_sim = sim.makespan;
        r.agree = sim.makespan_units == units;
        r.speedup = r.t_seq / r.t_par_closed;
        rows.push_back(r);
      }
    }
  }
  return rows;
}

namespace detail {

inline int parse_int(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  int v = 0;
  try {
    v = std::stoi(s, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != s.size()) throw ContractError("bad integer '" + s + "' for " + what);
  return v;
}

inline double parse_real(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != s.size()) throw ContractError("bad number '" + s + "' for " + what);
  return v;
}

inline IntRange parse_range(const std::string& s, const std::string& what) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) {
    const int v = parse_int(s, what);
    return {v, v};
  }
  return {parse_int(s.substr(0, dots), what), parse_int(s.substr(dots + 2), what)};
}

}  // namespace detail

/// Parses tokens like `k=1..6 l=1..12 g=1..4 c=1 delta=0`. Unspecified
/// keys keep their defaults.
inline SweepSpec parse_sweep(const std::vector<std::string>& tokens) {
  SweepSpec sw;
  for (const auto& tok : tokens) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw ContractError("expected key=value, got '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "k") sw.k = detail::parse_range(val, key);
    else if (key == "l") sw.l = detail::parse_range(val, key);
    else if (key == "g") sw.g = detail::parse_range(val, key);
    else if (key == "c") sw.c = detail::parse_real(val, key);
    else if (key == "delta") sw.delta = detail::parse_real(val, key);
    else throw ContractError("unknown sweep key '" + key + "' (expected k, l, g, c, delta)");
  }
  if (!(sw.c > 0) || !(sw.delta >= 0)) throw ContractError("sweep needs c > 0 and delta >= 0");
  for (const auto* r : {&sw.k, &sw.l, &sw.g}) {
    if (r->lo < 1 || r->hi < r->lo) throw ContractError("sweep ranges must satisfy 1 <= lo <= hi");
  }
  return sw;
}

inline std::string format_table_text(const std::vector<SpeedupRow>& rows) {
  std::ostringstream os;
  os << std::setw(4) << "k" << std::setw(5) << "l" << std::setw(4) << "g" << std::setw(12) << "T_seq"
     << std::setw(14) << "T_par_closed" << std::setw(12) << "T_par_sim" << std::setw(10) << "speedup" << '\n';
  os << std::fixed;
  for (const auto& r : rows) {
    os << std::setw(4) << r.k << std::setw(5) << r.l << std::setw(4) << r.g << std::setprecision(3) << std::setw(12)
       << r.t_seq << std::setw(14) << r.t_par_closed << std::setw(12) << r.t_par_sim << std::setprecision(4)
       << std::setw(10) << r.speedup << (r.agree ? "" : "  MISMATCH") << '\n';
  }
  return os.str();
}

inline std::string format_table_csv(const std::vector<SpeedupRow>& rows) {
  std::ostringstream os;
  os << "k,l,g,t_seq,t_par_closed,t_par_sim,speedup,agree\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.k << ',' << r.l << ',' << r.g << ',' << r.t_seq << ',' << r.t_par_closed << ',' << r.t_par_sim << ','
       << r.speedup << ',' << (r.agree ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace llmboost
