#pragma once

#include <algorithm>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcflow/controls.hpp"
#include "mcflow/godunov.hpp"

namespace mcflow {

/// J = a * TTT + b * TTD restricted to the classes in `mask` (empty = all).
struct Objective {
  double a = 1.0;
  double b = 0.0;
  std::vector<bool> mask;

  static Objective ttt() { return {1.0, 0.0, {}}; }
  static Objective ttd() { return {0.0, 1.0, {}}; }

  bool counts(int c) const { return mask.empty() || (c < static_cast<int>(mask.size()) && mask[c]); }
};

/// Parses "ttt" or "ttd" (case-sensitive).
inline Objective parse_objective(const std::string& s) {
  if (s == "ttt") return Objective::ttt();
  if (s == "ttd") return Objective::ttd();
  throw std::invalid_argument("unknown objective '" + s + "' (expected ttt or ttd)");
}

namespace detail {
inline double level_ttt(const Model& m, const Objective& o, std::span<const double> y) {
  const auto& g = m.grid;
  double cells = 0.0, queue = 0.0;
  for (int c = 0; c < m.classes(); ++c) {
    if (!o.counts(c)) continue;
    for (std::size_t r = 0; r < m.net.roads.size(); ++r)
      for (int j = 0; j < m.net.roads[r].cells; ++j) cells += y[m.topo.cell(c, static_cast<int>(r), j)];
    for (int q = 0; q < m.origin_count(); ++q) queue += y[m.topo.buffer(c, q)];
  }
  return g.dt * g.dx * cells + g.dt * queue;
}

inline double cell_total(const Model& m, std::span<const double> y, int road, int j) {
  double r = 0.0;
  for (int c = 0; c < m.classes(); ++c) r += y[m.topo.cell(c, road, j)];
  return r;
}

inline double level_ttd(const Model& m, const Objective& o, std::span<const double> y, const ControlSnapshot& snap) {
  double s = 0.0;
  for (std::size_t r = 0; r < m.net.roads.size(); ++r) {
    const int road = static_cast<int>(r);
    for (int j = 0; j < m.net.roads[r].cells; ++j) {
      const double tot = cell_total(m, y, road, j);
      for (int c = 0; c < m.classes(); ++c) {
        if (!o.counts(c)) continue;
        const Greenshields d{snap.speed[r][c], m.net.roads[r].per_class[c].r_max};
        s += y[m.topo.cell(c, road, j)] * d.velocity(tot);
      }
    }
  }
  return m.grid.dt * m.grid.dx * s;
}
}  // namespace detail

/// Total travel time over levels 0..T.
inline double ttt(const Model& m, const Trajectory& tr, const Objective& o = Objective::ttt()) {
  double s = 0.0;
  for (int nu = 0; nu <= tr.steps; ++nu) s += detail::level_ttt(m, o, tr.state(nu));
  return s;
}

/// Total travel distance over levels 0..T.
inline double ttd(const Model& m, const Trajectory& tr, const ControlSchedule& cs,
                  const Objective& o = Objective::ttd()) {
  double s = 0.0;
  for (int nu = 0; nu <= tr.steps; ++nu) s += detail::level_ttd(m, o, tr.state(nu), cs.at_step(nu, tr.steps));
  return s;
}

inline double evaluate(const Model& m, const Objective& o, const Trajectory& tr, const ControlSchedule& cs) {
  double j = 0.0;
  if (o.a != 0.0) j += o.a * ttt(m, tr, o);
  if (o.b != 0.0) j += o.b * ttd(m, tr, cs, o);
  return j;
}

/// Writes dJ/dy^nu into g (size = state size).
inline void d_cost_dy(const Model& m, const Objective& o, std::span<const double> y, const ControlSnapshot& snap,
                      std::span<double> g) {
  std::fill(g.begin(), g.end(), 0.0);
  const double dtdx = m.grid.dt * m.grid.dx;
  const int N = m.classes();
  if (o.a != 0.0) {
    for (int c = 0; c < N; ++c) {
      if (!o.counts(c)) continue;
      for (std::size_t r = 0; r < m.net.roads.size(); ++r)
        for (int j = 0; j < m.net.roads[r].cells; ++j) g[m.topo.cell(c, static_cast<int>(r), j)] += o.a * dtdx;
      for (int q = 0; q < m.origin_count(); ++q) g[m.topo.buffer(c, q)] += o.a * m.grid.dt;
    }
  }
  if (o.b != 0.0) {
    for (std::size_t r = 0; r < m.net.roads.size(); ++r) {
      const int road = static_cast<int>(r);
      for (int j = 0; j < m.net.roads[r].cells; ++j) {
        const double tot = detail::cell_total(m, y, road, j);
        // sum over counted classes of rho^c v_c'(r)
        double cross = 0.0;
        for (int c = 0; c < N; ++c) {
          if (!o.counts(c)) continue;
          const Greenshields d{snap.speed[r][c], m.net.roads[r].per_class[c].r_max};
          cross += y[m.topo.cell(c, road, j)] * d.dv_dr(tot);
        }
        for (int c = 0; c < N; ++c) {
          const Greenshields d{snap.speed[r][c], m.net.roads[r].per_class[c].r_max};
          const double own = o.counts(c) ? d.velocity(tot) : 0.0;
          g[m.topo.cell(c, road, j)] += o.b * dtdx * (own + cross);
        }
      }
    }
  }
}

/// Explicit dJ/du (only speed-limit controls enter the cost directly).
inline std::vector<double> d_cost_du(const Model& m, const Objective& o, const Trajectory& tr,
                                     const ControlSchedule& cs, const ControlLayout& layout) {
  std::vector<double> g(layout.size(), 0.0);
  if (o.b == 0.0) return g;
  const double dtdx = m.grid.dt * m.grid.dx;
  for (int i = 0; i < layout.size(); ++i) {
    const auto& s = layout[i];
    if (s.kind != SlotKind::Speed || !o.counts(s.cls)) continue;
    const int road = s.owner;
    for (int nu = 0; nu <= tr.steps; ++nu) {
      if (cs.piece_of_step(nu, tr.steps) != s.piece) continue;
      const auto y = tr.state(nu);
      const Greenshields d{cs.pieces[s.piece].speed[road][s.cls], m.net.roads[road].per_class[s.cls].r_max};
      for (int j = 0; j < m.net.roads[road].cells; ++j)
        g[i] += o.b * dtdx * y[m.topo.cell(s.cls, road, j)] * d.dv_dV(detail::cell_total(m, y, road, j));
    }
  }
  return g;
}

}  // namespace mcflow
