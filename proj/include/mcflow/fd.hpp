#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mcflow/controls.hpp"
#include "mcflow/cost.hpp"
#include "mcflow/godunov.hpp"
#include "mcflow/parallel.hpp"

namespace mcflow {

struct FdOptions {
  double h = 1e-6;
  int threads = 1;
  /// Initial state for the network form; empty means an empty network.
  std::vector<double> y0;
};

struct FdResult {
  std::vector<double> gradient;
  /// Component used a one-sided difference because u_i was within h of a bound.
  std::vector<bool> one_sided;
  /// Some branch decision differed between the perturbed and base runs.
  std::vector<bool> kink;
  int evaluations = 0;
};

/// Finite-difference gradient of a black-box J over a box. Central where
/// u_i +- h stays inside [lo_i, hi_i]; otherwise the second-order one-sided
/// stencil pointing into the box.
inline FdResult fd_gradient(const std::function<double(std::span<const double>)>& J, std::span<const double> u,
                            std::span<const double> lo, std::span<const double> hi, FdOptions opt = {}) {
  if (!(opt.h > 0.0)) throw std::invalid_argument("fd_gradient: h must be positive");
  const int d = static_cast<int>(u.size());
  FdResult res;
  res.gradient.assign(d, 0.0);
  res.one_sided.assign(d, false);
  res.kink.assign(d, false);
  double j0 = 0.0;
  bool need_j0 = false;
  for (int i = 0; i < d; ++i)
    if (u[i] - opt.h < lo[i] || u[i] + opt.h > hi[i]) need_j0 = true;
  if (need_j0) {
    j0 = J(u);
    ++res.evaluations;
  }
  std::vector<int> evals(d, 0);
  parallel_for(d, opt.threads, [&](int i) {
    std::vector<double> w(u.begin(), u.end());
    const double h = opt.h;
    auto at = [&](double x) {
      w[i] = x;
      ++evals[i];
      return J(w);
    };
    if (u[i] - h >= lo[i] && u[i] + h <= hi[i]) {
      res.gradient[i] = (at(u[i] + h) - at(u[i] - h)) / (2.0 * h);
    } else {
      res.one_sided[i] = true;
      const double s = (u[i] + 2.0 * h <= hi[i]) ? 1.0 : -1.0;
      const double j1 = at(u[i] + s * h), j2 = at(u[i] + 2.0 * s * h);
      res.gradient[i] = s * (-3.0 * j0 + 4.0 * j1 - j2) / (2.0 * h);
    }
  });
  for (int e : evals) res.evaluations += e;
  return res;
}

namespace detail {
inline bool same_branches(const Trajectory& a, const Trajectory& b) {
  if (a.tags.size() != b.tags.size()) return false;
  for (std::size_t k = 0; k < a.tags.size(); ++k)
    if ((a.tags[k] & tag::Mask) != (b.tags[k] & tag::Mask)) return false;
  return true;
}
}  // namespace detail

/// Tangential part of g for grouped (simplex) slots: each group has its mean
/// removed. Other components are copied.
inline std::vector<double> tangent_project(const ControlLayout& layout, std::span<const double> g) {
  std::vector<double> out(g.begin(), g.end());
  std::vector<double> sum;
  std::vector<int> count;
  for (int i = 0; i < layout.size(); ++i) {
    const int grp = layout[i].group;
    if (grp < 0) continue;
    if (grp >= static_cast<int>(sum.size())) {
      sum.resize(grp + 1, 0.0);
      count.resize(grp + 1, 0);
    }
    sum[grp] += g[i];
    ++count[grp];
  }
  for (int i = 0; i < layout.size(); ++i)
    if (layout[i].group >= 0) out[i] -= sum[layout[i].group] / count[layout[i].group];
  return out;
}

/// FD gradient of a network objective w.r.t. the free controls of `layout`.
/// Grouped weights are perturbed along e_i minus the group mean so the
/// weights stay stochastic; those entries compare against
/// tangent_project(adjoint gradient). Components whose perturbed runs switch
/// any branch decision are flagged as kinks.
inline FdResult fd_gradient(const Model& m, const Objective& obj, const ControlSchedule& cs,
                            const ControlLayout& layout, FdOptions opt = {}) {
  if (!(opt.h > 0.0)) throw std::invalid_argument("fd_gradient: h must be positive");
  const auto u = layout.extract(cs);
  const int d = layout.size();
  FdResult res;
  res.gradient.assign(d, 0.0);
  res.one_sided.assign(d, false);
  res.kink.assign(d, false);
  const Trajectory base = simulate(m, cs, opt.y0);
  const double j0 = evaluate(m, obj, base, cs);
  res.evaluations = 1;

  std::vector<std::vector<int>> members;
  for (int i = 0; i < d; ++i) {
    const int grp = layout[i].group;
    if (grp < 0) continue;
    if (grp >= static_cast<int>(members.size())) members.resize(grp + 1);
    members[grp].push_back(i);
  }
  std::vector<int> evals(d, 0);
  std::vector<char> kink(d, 0);
  parallel_for(d, opt.threads, [&](int i) {
    std::vector<std::pair<int, double>> dir;
    if (layout[i].group < 0) {
      dir.push_back({i, 1.0});
    } else {
      const auto& mem = members[layout[i].group];
      for (int k : mem) dir.push_back({k, (k == i ? 1.0 : 0.0) - 1.0 / mem.size()});
    }
    auto inside = [&](double t) {
      for (auto [k, a] : dir) {
        const double x = u[k] + t * a;
        if (x < layout[k].lo || x > layout[k].hi) return false;
      }
      return true;
    };
    auto at = [&](double t) {
      std::vector<double> w(u);
      for (auto [k, a] : dir) w[k] += t * a;
      ControlSchedule c2 = cs;
      layout.apply(c2, w);
      const auto tr = simulate(m, c2, opt.y0);
      if (!detail::same_branches(base, tr)) kink[i] = 1;
      ++evals[i];
      return evaluate(m, obj, tr, c2);
    };
    const double h = opt.h;
    if (inside(h) && inside(-h)) {
      res.gradient[i] = (at(h) - at(-h)) / (2.0 * h);
    } else {
      res.one_sided[i] = true;
      const double s = inside(2.0 * h) ? 1.0 : -1.0;
      const double j1 = at(s * h), j2 = at(2.0 * s * h);
      res.gradient[i] = s * (-3.0 * j0 + 4.0 * j1 - j2) / (2.0 * h);
    }
  });
  for (int i = 0; i < d; ++i) {
    res.evaluations += evals[i];
    res.kink[i] = kink[i] != 0;
  }
  return res;
}

/// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace mcflow
