#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcflow/adjoint.hpp"
#include "mcflow/controls.hpp"
#include "mcflow/cost.hpp"
#include "mcflow/fd.hpp"
#include "mcflow/godunov.hpp"
#include "mcflow/parallel.hpp"

namespace mcflow {

enum class GradientMethod { Adjoint, Fd };

inline GradientMethod parse_method(const std::string& s) {
  if (s == "adjoint") return GradientMethod::Adjoint;
  if (s == "fd") return GradientMethod::Fd;
  throw std::invalid_argument("unknown gradient method '" + s + "' (expected adjoint or fd)");
}

struct OptimizerConfig {
  int max_iterations = 1000;
  int max_evaluations = 10000;
  double step_tolerance = 1e-7;
  /// Relative: |J_k - J_{k+1}| <= tol * max(1, |J_k|).
  double function_tolerance = 1e-7;
  /// Infinity norm of u - P(u - g).
  double optimality_tolerance = 1e-6;
  /// First trial step; <= 0 means 0.25 / |g|_inf at the start point.
  double initial_step = 0.0;
  double shrink = 0.5;
  double armijo_c = 1e-4;
  GradientMethod method = GradientMethod::Adjoint;
  double fd_step = 1e-6;

  void validate() const {
    if (max_iterations < 1 || max_evaluations < 1) throw std::invalid_argument("optimizer budgets must be positive");
    if (!(step_tolerance > 0.0 && function_tolerance > 0.0 && optimality_tolerance > 0.0))
      throw std::invalid_argument("optimizer tolerances must be positive");
    if (!(shrink > 0.0 && shrink < 1.0)) throw std::invalid_argument("shrink factor must lie in (0, 1)");
    if (!(armijo_c > 0.0 && armijo_c < 1.0)) throw std::invalid_argument("Armijo constant must lie in (0, 1)");
    if (!(fd_step > 0.0)) throw std::invalid_argument("fd step must be positive");
  }
};

/// Feasible set: a box per component, plus groups of components that must
/// also lie on the probability simplex.
struct Bounds {
  std::vector<double> lo;
  std::vector<double> hi;
  std::vector<int> group;  // -1 = box only

  static Bounds unit_box(int d) { return {std::vector<double>(d, 0.0), std::vector<double>(d, 1.0), std::vector<int>(d, -1)}; }
  static Bounds of(const ControlLayout& layout) {
    Bounds b;
    for (const auto& s : layout.slots()) {
      b.lo.push_back(s.lo);
      b.hi.push_back(s.hi);
      b.group.push_back(s.group);
    }
    return b;
  }
  int size() const { return static_cast<int>(lo.size()); }
};

/// Euclidean projection of v onto {x >= 0, sum x = 1}.
inline std::vector<double> project_simplex(std::vector<double> v) {
  std::vector<double> s = v;
  std::sort(s.begin(), s.end(), std::greater<>());
  double cum = 0.0, theta = 0.0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    cum += s[k];
    const double t = (cum - 1.0) / static_cast<double>(k + 1);
    if (s[k] - t > 0.0) theta = t;
  }
  for (double& x : v) x = std::max(x - theta, 0.0);
  return v;
}

/// Clamps each component into its box; grouped components are projected onto
/// the simplex instead.
inline std::vector<double> project_box(std::span<const double> u, const Bounds& b) {
  std::vector<double> out(u.begin(), u.end());
  std::vector<std::vector<int>> groups;
  for (int i = 0; i < b.size(); ++i) {
    if (b.group[i] < 0) {
      out[i] = std::clamp(out[i], b.lo[i], b.hi[i]);
    } else {
      if (b.group[i] >= static_cast<int>(groups.size())) groups.resize(b.group[i] + 1);
      groups[b.group[i]].push_back(i);
    }
  }
  for (const auto& g : groups) {
    std::vector<double> v;
    for (int i : g) v.push_back(out[i]);
    v = project_simplex(std::move(v));
    for (std::size_t k = 0; k < g.size(); ++k) out[g[k]] = v[k];
  }
  return out;
}

/// Value and gradient oracle for `minimize`.
struct Problem {
  std::function<double(std::span<const double>)> value;
  std::function<double(std::span<const double>, std::vector<double>&)> value_and_gradient;
  Bounds bounds;
};

enum class OptStatus { Optimality, FunctionTolerance, StepTolerance, MaxIterations, MaxEvaluations };

inline const char* to_string(OptStatus s) {
  switch (s) {
    case OptStatus::Optimality: return "optimality";
    case OptStatus::FunctionTolerance: return "function_tolerance";
    case OptStatus::StepTolerance: return "step_tolerance";
    case OptStatus::MaxIterations: return "max_iterations";
    case OptStatus::MaxEvaluations: return "max_evaluations";
  }
  return "?";
}

struct IterationRecord {
  int iteration = 0;
  double value = 0.0;
  /// |u - P(u - g)|_inf at the iterate.
  double pg_norm = 0.0;
  /// Accepted step length (0 for the last record).
  double step = 0.0;
  /// Cumulative objective evaluations, gradient calls included.
  int evaluations = 0;
  /// sufficient-decrease margin of the accepted step, >= 0 when Armijo holds
  double armijo_margin = 0.0;
};

struct OptResult {
  std::vector<double> u;
  double value = 0.0;
  OptStatus status = OptStatus::MaxIterations;
  std::vector<IterationRecord> log;
  int evaluations = 0;
  bool converged() const {
    return status == OptStatus::Optimality || status == OptStatus::FunctionTolerance ||
           status == OptStatus::StepTolerance;
  }
};

namespace detail {
inline double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}
inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}
}  // namespace detail

/// Projected-gradient descent with Armijo backtracking along the projection
/// arc. An accepted step t satisfies
///   J(u+) <= J(u) - c * t * |pg_t|^2,  pg_t = (u - P(u - t g)) / t.
/// After an accepted iteration the next trial step is the Barzilai-Borwein
/// quotient s.s / s.y, or double the last step when s.y <= 0.
inline OptResult minimize(const Problem& prob, std::span<const double> u0, const OptimizerConfig& cfg = {}) {
  cfg.validate();
  const auto& B = prob.bounds;
  if (static_cast<int>(u0.size()) != B.size()) throw std::invalid_argument("start point dimension mismatch");
  OptResult res;
  res.u = project_box(u0, B);
  for (std::size_t i = 0; i < u0.size(); ++i)
    if (std::abs(res.u[i] - u0[i]) > 1e-9) throw std::invalid_argument("start point is infeasible");

  std::vector<double> g;
  double J = prob.value_and_gradient(res.u, g);
  res.evaluations = 1;
  double t = cfg.initial_step;
  if (t <= 0.0) {
    const double gi = detail::inf_norm(g);
    t = gi > 0.0 ? 0.25 / gi : 1.0;
  }
  std::vector<double> trial(res.u.size());
  for (int it = 0;; ++it) {
    std::vector<double> unit(res.u.size());
    for (std::size_t i = 0; i < unit.size(); ++i) unit[i] = res.u[i] - g[i];
    unit = project_box(unit, B);
    for (std::size_t i = 0; i < unit.size(); ++i) unit[i] = res.u[i] - unit[i];
    const double pg = detail::inf_norm(unit);
    res.log.push_back({it, J, pg, 0.0, res.evaluations, 0.0});
    res.value = J;
    if (pg <= cfg.optimality_tolerance) {
      res.status = OptStatus::Optimality;
      return res;
    }
    if (it + 1 >= cfg.max_iterations) {
      res.status = OptStatus::MaxIterations;
      return res;
    }
    // backtracking
    double Jt = 0.0;
    bool accepted = false;
    for (;;) {
      if (res.evaluations >= cfg.max_evaluations) {
        res.status = OptStatus::MaxEvaluations;
        return res;
      }
      for (std::size_t i = 0; i < trial.size(); ++i) trial[i] = res.u[i] - t * g[i];
      trial = project_box(trial, B);
      const double d2 = detail::sq_dist(trial, res.u);
      if (std::sqrt(d2) <= cfg.step_tolerance) break;
      Jt = prob.value(trial);
      ++res.evaluations;
      const double margin = (J - cfg.armijo_c * d2 / t) - Jt;
      if (margin >= 0.0) {
        res.log.back().step = t;
        res.log.back().armijo_margin = margin;
        accepted = true;
        break;
      }
      t *= cfg.shrink;
    }
    if (!accepted) {
      res.status = OptStatus::StepTolerance;
      return res;
    }
    const double dJ = J - Jt;
    const double step_len = std::sqrt(detail::sq_dist(trial, res.u));
    const std::vector<double> prev = res.u;
    res.u = trial;
    if (res.evaluations >= cfg.max_evaluations) {
      res.value = Jt;
      res.log.push_back({it + 1, Jt, std::numeric_limits<double>::quiet_NaN(), 0.0, res.evaluations, 0.0});
      res.status = OptStatus::MaxEvaluations;
      return res;
    }
    const std::vector<double> g_old = g;
    J = prob.value_and_gradient(res.u, g);
    ++res.evaluations;
    if (dJ <= cfg.function_tolerance * std::max(1.0, std::abs(J)) || step_len <= cfg.step_tolerance) {
      res.value = J;
      res.log.push_back({it + 1, J, std::numeric_limits<double>::quiet_NaN(), 0.0, res.evaluations, 0.0});
      res.status = dJ <= cfg.function_tolerance * std::max(1.0, std::abs(J)) ? OptStatus::FunctionTolerance
                                                                             : OptStatus::StepTolerance;
      return res;
    }
    // Barzilai-Borwein step s.s / s.y; doubling when the curvature is not positive
    double ss = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double si = trial[i] - prev[i];
      ss += si * si;
      sy += si * (g[i] - g_old[i]);
    }
    t = sy > 0.0 ? std::clamp(ss / sy, 1e-12, 1e12) : t / cfg.shrink;
  }
}

/// Uniform random feasible point: box components uniform in [lo, hi], simplex
/// groups uniform on the simplex.
inline std::vector<double> random_point(const Bounds& b, std::mt19937_64& rng) {
  std::vector<double> u(b.size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> group_sum;
  for (int i = 0; i < b.size(); ++i) {
    if (b.group[i] < 0) {
      u[i] = b.lo[i] + (b.hi[i] - b.lo[i]) * unif(rng);
    } else {
      u[i] = expo(rng);
      if (b.group[i] >= static_cast<int>(group_sum.size())) group_sum.resize(b.group[i] + 1, 0.0);
      group_sum[b.group[i]] += u[i];
    }
  }
  for (int i = 0; i < b.size(); ++i)
    if (b.group[i] >= 0) u[i] /= group_sum[b.group[i]];
  return u;
}

struct MultistartResult {
  OptResult best;
  int best_start = 0;
  std::vector<OptResult> runs;
};

/// Runs `minimize` from u0 and from restarts-1 random feasible points drawn
/// with `seed`. The lowest final value wins; ties go to the earlier start.
inline MultistartResult multistart(const Problem& prob, std::span<const double> u0, const OptimizerConfig& cfg,
                                   int restarts, std::uint64_t seed, int threads = 1) {
  if (restarts < 1) throw std::invalid_argument("restarts must be >= 1");
  std::vector<std::vector<double>> starts{std::vector<double>(u0.begin(), u0.end())};
  std::mt19937_64 rng(seed);
  for (int k = 1; k < restarts; ++k) starts.push_back(random_point(prob.bounds, rng));
  MultistartResult out;
  out.runs.resize(restarts);
  parallel_for(restarts, threads, [&](int k) { out.runs[k] = minimize(prob, starts[k], cfg); });
  for (int k = 1; k < restarts; ++k)
    if (out.runs[k].value < out.runs[out.best_start].value) out.best_start = k;
  out.best = out.runs[out.best_start];
  return out;
}

/// Objective of a network model as a function of the free controls.
class NetworkProblem {
 public:
  NetworkProblem(const Model& m, Objective obj, ControlSchedule base, const ControlLayout& layout,
                 GradientMethod method = GradientMethod::Adjoint, double fd_step = 1e-6)
      : m_(m), obj_(std::move(obj)), base_(std::move(base)), layout_(layout), method_(method), fd_step_(fd_step) {}

  ControlSchedule schedule(std::span<const double> u) const {
    ControlSchedule cs = base_;
    layout_.apply(cs, u);
    return cs;
  }

  double value(std::span<const double> u) const {
    const auto cs = schedule(u);
    return evaluate(m_, obj_, simulate(m_, cs), cs);
  }

  double value_and_gradient(std::span<const double> u, std::vector<double>& g) const {
    const auto cs = schedule(u);
    if (method_ == GradientMethod::Adjoint) {
      auto rep = gradient(m_, obj_, cs, layout_);
      g = std::move(rep.gradient);
      return rep.value;
    }
    FdOptions fo;
    fo.h = fd_step_;
    g = fd_gradient(m_, obj_, cs, layout_, fo).gradient;
    return value(u);
  }

  Problem problem() const {
    return {[this](std::span<const double> u) { return value(u); },
            [this](std::span<const double> u, std::vector<double>& g) { return value_and_gradient(u, g); },
            Bounds::of(layout_)};
  }

  const ControlLayout& layout() const { return layout_; }
  std::vector<double> start() const { return layout_.extract(base_); }

 private:
  const Model& m_;
  Objective obj_;
  ControlSchedule base_;
  const ControlLayout& layout_;
  GradientMethod method_;
  double fd_step_;
};

struct GridResult {
  int dims = 0;
  int resolution = 0;
  /// Row-major over the free components, first component slowest.
  std::vector<double> values;
  std::vector<double> argmin;
  double min_value = 0.0;

  double coordinate(int k) const { return resolution == 1 ? 0.0 : static_cast<double>(k) / (resolution - 1); }
  /// Lattice indices of flat entry `flat`.
  std::vector<int> indices(std::size_t flat) const {
    std::vector<int> idx(dims);
    for (int d = dims - 1; d >= 0; --d) {
      idx[d] = static_cast<int>(flat % resolution);
      flat /= resolution;
    }
    return idx;
  }
};

/// Exhaustive evaluation of J on the uniform lattice {k/(R-1)} over the box
/// of every free slot in `layout` (all slots must have bounds [0, 1] and no
/// simplex group). Ties resolve to the first lattice point in row-major order.
inline GridResult grid_search(const Model& m, const Objective& obj, const ControlSchedule& base,
                              const ControlLayout& layout, int resolution, int threads = 1) {
  if (resolution < 2) throw std::invalid_argument("grid resolution must be >= 2");
  const int d = layout.size();
  if (d < 1 || d > 4) throw std::invalid_argument("grid search supports 1 to 4 free controls");
  for (const auto& s : layout.slots())
    if (s.group >= 0 || s.lo != 0.0 || s.hi != 1.0)
      throw std::invalid_argument("grid search needs unit-box controls");
  GridResult gr;
  gr.dims = d;
  gr.resolution = resolution;
  std::size_t total = 1;
  for (int k = 0; k < d; ++k) total *= resolution;
  gr.values.assign(total, 0.0);
  NetworkProblem np(m, obj, base, layout);
  parallel_for(static_cast<int>(total), threads, [&](int flat) {
    const auto idx = gr.indices(flat);
    std::vector<double> u(d);
    for (int k = 0; k < d; ++k) u[k] = gr.coordinate(idx[k]);
    gr.values[flat] = np.value(u);
  });
  std::size_t best = 0;
  for (std::size_t f = 1; f < total; ++f)
    if (gr.values[f] < gr.values[best]) best = f;
  gr.min_value = gr.values[best];
  for (int k : gr.indices(best)) gr.argmin.push_back(gr.coordinate(k));
  return gr;
}

struct ParetoPoint {
  double weight = 0.0;
  std::vector<double> controls;
  double ttt = 0.0;
  double ttd = 0.0;
  bool dominated = false;
  OptStatus status = OptStatus::MaxIterations;
};

/// a dominates b when it is no worse in both and better in one
/// Objective values closer than this (relative) count as equal; TTD in
/// particular carries summation noise around 1e-13 between control sets.
inline constexpr double kParetoRel = 1e-9;

namespace detail {
// -1: a < b, 0: equal within kParetoRel, 1: a > b
inline int pareto_cmp(double a, double b) {
  const double tol = kParetoRel * std::max({1.0, std::abs(a), std::abs(b)});
  return a < b - tol ? -1 : (a > b + tol ? 1 : 0);
}
}  // namespace detail

inline bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
  const int t = detail::pareto_cmp(a.ttt, b.ttt), d = detail::pareto_cmp(a.ttd, b.ttd);
  return t <= 0 && d <= 0 && (t < 0 || d < 0);
}

inline bool same_objectives(const ParetoPoint& a, const ParetoPoint& b) {
  return detail::pareto_cmp(a.ttt, b.ttt) == 0 && detail::pareto_cmp(a.ttd, b.ttd) == 0;
}

struct ParetoResult {
  double ttt0 = 0.0;
  double ttd0 = 0.0;
  /// Every weight's result, dominated flag set.
  std::vector<ParetoPoint> all;
  /// Non-dominated points sorted by TTT.
  std::vector<ParetoPoint> front;
  std::vector<std::string> warnings;
};

/// Weighted-sum sweep: for w = 0, 1/(W-1), ..., 1 minimizes
/// w TTT/TTT0 + (1-w) TTD/TTD0 from the base controls, with TTT0/TTD0 taken
/// at the base controls. Both objectives are minimized.
inline ParetoResult pareto_sweep(const Model& m, const ControlSchedule& base, const ControlLayout& layout, int W,
                                 const OptimizerConfig& cfg, int restarts = 1, std::uint64_t seed = 0,
                                 int threads = 1) {
  if (W < 2) throw std::invalid_argument("Pareto sweep needs at least two weights");
  ParetoResult pr;
  const auto tr0 = simulate(m, base);
  pr.ttt0 = ttt(m, tr0);
  pr.ttd0 = ttd(m, tr0, base);
  if (!(pr.ttt0 > 0.0) || !(pr.ttd0 > 0.0)) throw std::runtime_error("Pareto sweep needs positive TTT and TTD at the start");
  pr.all.resize(W);
  std::vector<char> ok(W, 0);
  std::vector<std::string> errors(W);
  parallel_for(W, threads, [&](int k) {
    const double w = static_cast<double>(k) / (W - 1);
    Objective obj{w / pr.ttt0, (1.0 - w) / pr.ttd0, {}};
    NetworkProblem np(m, obj, base, layout, cfg.method, cfg.fd_step);
    try {
      const auto ms = multistart(np.problem(), np.start(), cfg, restarts, seed + static_cast<std::uint64_t>(k));
      auto& p = pr.all[k];
      p.weight = w;
      p.controls = ms.best.u;
      p.status = ms.best.status;
      const auto cs = np.schedule(p.controls);
      const auto tr = simulate(m, cs);
      p.ttt = ttt(m, tr);
      p.ttd = ttd(m, tr, cs);
      ok[k] = 1;
    } catch (const std::exception& e) {
      errors[k] = e.what();
    }
  });
  std::vector<ParetoPoint> kept;
  for (int k = 0; k < W; ++k) {
    if (!ok[k]) {
      pr.warnings.push_back("weight " + std::to_string(k) + " skipped: " + errors[k]);
      continue;
    }
    kept.push_back(pr.all[k]);
  }
  // duplicates within tolerance keep the lowest weight
  for (std::size_t i = 0; i < kept.size(); ++i)
    for (std::size_t k = 0; k < kept.size(); ++k)
      if (dominates(kept[k], kept[i]) || (k < i && same_objectives(kept[k], kept[i]))) kept[i].dominated = true;
  pr.all = kept;
  for (const auto& p : kept)
    if (!p.dominated) pr.front.push_back(p);
  std::stable_sort(pr.front.begin(), pr.front.end(), [](const auto& a, const auto& b) { return a.ttt < b.ttt; });
  return pr;
}

}  // namespace mcflow
