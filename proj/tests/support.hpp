#pragma once

// Shared helpers for the test binaries: random small networks, the mass
// ledger and an independent dense adjoint solve.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcflow/adjoint.hpp"
#include "mcflow/controls.hpp"
#include "mcflow/cost.hpp"
#include "mcflow/godunov.hpp"
#include "mcflow/network.hpp"
#include "mcflow/scenario_io.hpp"

#ifndef MCFLOW_SCENARIO_DIR
#define MCFLOW_SCENARIO_DIR "scenarios"
#endif

namespace testsupport {

using namespace mcflow;

inline std::string scenario_path(const std::string& name) { return std::string(MCFLOW_SCENARIO_DIR) + "/" + name; }

/// Bundled fig5 network as a Model (capped buffer demand).
inline Model fig5_model(BufferDemand mode = BufferDemand::Capped) {
  return Model(load_network(scenario_path("fig5.json")), mode);
}

struct RandomCase {
  Model model;
  ControlSchedule schedule;
  ControlLayout layout;
  std::vector<double> y0;
};

/// Shapes used by the generator.
enum class Shape { Chain, Diverge, DiamondFifo, DiamondNonFifo, TwoOrigins, ThreeWay };

/// A random network with <= 4 roads, 2..max_cells cells per road, 2 classes
/// and <= max_steps steps, plus random controls (all weights and, when
/// `speeds` is set, one speed limit free) and a random initial state inside
/// the invariant set.
class Generator {
 public:
  explicit Generator(std::uint64_t seed) : rng_(seed) {}

  double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng_); }
  int integer(int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng_); }

  std::unique_ptr<RandomCase> make(int max_cells = 6, int max_steps = 10, int n = 1, bool speeds = true,
                                   BufferDemand mode = BufferDemand::Capped) {
    const Shape shape = static_cast<Shape>(integer(0, 5));
    Network net;
    net.classes = 2;
    const double dx = 0.1;
    auto road = [&](const std::string& id) {
      Road r;
      r.id = id;
      r.cells = integer(2, max_cells);
      r.length = r.cells * dx;
      for (int c = 0; c < 2; ++c) r.per_class.push_back({uniform(20.0, 80.0), uniform(60.0, 150.0)});
      net.roads.push_back(r);
      return static_cast<int>(net.roads.size()) - 1;
    };
    auto origin = [&](const std::string& id, int out) {
      Junction j;
      j.id = id;
      j.kind = JunctionKind::Origin;
      j.out = {out};
      j.inflow.push_back({uniform(0.2, 0.7), {uniform(0.0, 2500.0), uniform(0.0, 1500.0)}});
      j.inflow.push_back({10.0, {uniform(0.0, 800.0), uniform(0.0, 800.0)}});
      net.junctions.push_back(j);
    };
    auto dest = [&](const std::string& id, int in) {
      Junction j;
      j.id = id;
      j.kind = JunctionKind::Destination;
      j.in = {in};
      j.outflow_cap = {uniform(200.0, 3000.0), uniform(200.0, 3000.0)};
      net.junctions.push_back(j);
    };
    auto weights = [&](int nb) {
      std::vector<std::vector<double>> w(2);
      for (auto& v : w) {
        double s = 0.0;
        for (int b = 0; b < nb; ++b) {
          v.push_back(uniform(0.05, 1.0));
          s += v.back();
        }
        for (double& x : v) x /= s;
      }
      return w;
    };
    auto inner = [&](const std::string& id, JunctionKind k, std::vector<int> in, std::vector<int> out) {
      Junction j;
      j.id = id;
      j.label = "j" + id;
      j.kind = k;
      j.in = std::move(in);
      j.out = std::move(out);
      const int nb = j.branch_count();
      if (nb > 0) j.weights = weights(nb);
      net.junctions.push_back(j);
    };
    switch (shape) {
      case Shape::Chain: {
        const int a = road("1"), b = road("2");
        origin("o", a);
        inner("l", JunctionKind::Link, {a}, {b});
        dest("d", b);
        break;
      }
      case Shape::Diverge: {
        const int a = road("1"), b = road("2"), c = road("3");
        origin("o", a);
        inner("s", integer(0, 1) ? JunctionKind::DivergeFifo : JunctionKind::DivergeNonFifo, {a}, {b, c});
        dest("d2", b);
        dest("d3", c);
        break;
      }
      case Shape::DiamondFifo:
      case Shape::DiamondNonFifo: {
        const int a = road("1"), b = road("2"), c = road("3"), d = road("4");
        origin("o", a);
        inner("s", shape == Shape::DiamondFifo ? JunctionKind::DivergeFifo : JunctionKind::DivergeNonFifo, {a},
              {b, c});
        inner("m", JunctionKind::Merge, {b, c}, {d});
        dest("d", d);
        break;
      }
      case Shape::TwoOrigins: {
        const int a = road("1"), b = road("2"), c = road("3");
        origin("o1", a);
        origin("o2", b);
        inner("m", JunctionKind::Merge, {a, b}, {c});
        dest("d", c);
        break;
      }
      case Shape::ThreeWay: {
        const int a = road("1"), b = road("2"), c = road("3"), d = road("4");
        origin("o", a);
        inner("s", integer(0, 1) ? JunctionKind::DivergeFifo : JunctionKind::DivergeNonFifo, {a}, {b, c, d});
        dest("d2", b);
        dest("d3", c);
        dest("d4", d);
        break;
      }
    }
    net.grid.dx = dx;
    net.grid.cfl_safety = 1.0;
    const int steps = integer(3, max_steps);
    net.grid.t_final = steps * dx / max_wave_speed(net);
    auto rc = std::unique_ptr<RandomCase>(new RandomCase{Model(std::move(net), mode), {}, {}, {}});
    const auto& mnet = rc->model.net;
    rc->schedule = ControlSchedule::defaults(mnet, n);
    rc->layout = ControlLayout(mnet, n);
    for (auto& piece : rc->schedule.pieces) {
      for (std::size_t j = 0; j < mnet.junctions.size(); ++j) {
        const int nb = mnet.junctions[j].branch_count();
        if (nb < 2) continue;
        piece.weights[j] = weights(nb);
      }
    }
    for (std::size_t j = 0; j < mnet.junctions.size(); ++j)
      if (mnet.junctions[j].branch_count() >= 2)
        for (int c = 0; c < 2; ++c) rc->layout.free_weight(static_cast<int>(j), c);
    if (speeds) {
      const int r = integer(0, static_cast<int>(mnet.roads.size()) - 1);
      const int c = integer(0, 1);
      for (auto& piece : rc->schedule.pieces) piece.speed[r][c] = uniform(0.5, 1.0) * mnet.roads[r].per_class[c].v_max;
      rc->layout.free_speed(r, c);
    }
    rc->y0 = random_state(rc->model);
    return rc;
  }

  /// Random densities inside the invariant set; buffers random and sometimes empty.
  std::vector<double> random_state(const Model& m) {
    std::vector<double> y(m.state_size(), 0.0);
    for (std::size_t r = 0; r < m.net.roads.size(); ++r) {
      const auto& road = m.net.roads[r];
      const double Rmin = std::min(road.per_class[0].r_max, road.per_class[1].r_max);
      for (int j = 0; j < road.cells; ++j) {
        const double tot = uniform(0.0, 0.95) * Rmin;
        const double share = uniform(0.0, 1.0);
        y[m.topo.cell(0, static_cast<int>(r), j)] = tot * share;
        y[m.topo.cell(1, static_cast<int>(r), j)] = tot * (1.0 - share);
      }
    }
    for (int o = 0; o < m.origin_count(); ++o)
      for (int c = 0; c < m.classes(); ++c) y[m.topo.buffer(c, o)] = integer(0, 2) == 0 ? 0.0 : uniform(0.0, 5.0);
    return y;
  }

 private:
  std::mt19937_64 rng_;
};

/// Vehicles on the network at level nu: dx * sum of densities plus queues.
inline double total_mass(const Model& m, std::span<const double> y) {
  double s = 0.0;
  for (int c = 0; c < m.classes(); ++c) {
    for (std::size_t r = 0; r < m.net.roads.size(); ++r)
      for (int j = 0; j < m.net.roads[r].cells; ++j) s += m.grid.dx * y[m.topo.cell(c, static_cast<int>(r), j)];
    for (int o = 0; o < m.origin_count(); ++o) s += y[m.topo.buffer(c, o)];
  }
  return s;
}

/// Vehicles that left through destinations during step `s`, divided by dt.
inline double exit_rate(const Model& m, const Trajectory& tr, int s) {
  const auto f = tr.fluxes(s);
  double out = 0.0;
  for (const auto& j : m.net.junctions) {
    if (j.kind != JunctionKind::Destination) continue;
    const int r = j.in[0];
    for (int c = 0; c < m.classes(); ++c) out += f[m.topo.iface(c, r, m.net.roads[r].cells)];
  }
  return out;
}

/// Exogenous arrival rate summed over origins and classes during step `s`.
inline double arrival_rate(const Model& m, const Trajectory& tr, int s) {
  const int k = m.origin_count() * m.classes();
  double in = 0.0;
  for (int i = 0; i < k; ++i) in += tr.inflow[static_cast<std::size_t>(s) * k + i];
  return in;
}

/// Adjoint vectors xi^1..xi^T from a dense explicit triangular solve of
/// E_y^T xi = -J_y, with E_y assembled block by block.
inline std::vector<std::vector<double>> dense_adjoint(const Model& m, const Objective& obj, const Trajectory& tr,
                                                      const ControlSchedule& cs, const ControlLayout& layout) {
  const int T = tr.steps, n = m.state_size();
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(T * n, T * n);
  Eigen::VectorXd rhs(T * n);
  std::vector<double> g(n);
  for (int nu = 1; nu <= T; ++nu) {
    d_cost_dy(m, obj, tr.state(nu), cs.at_step(nu, T), g);
    for (int i = 0; i < n; ++i) rhs[(nu - 1) * n + i] = -g[i];
    if (nu == 1) continue;
    // E^nu depends on y^{nu-1} through B^nu: entry (row of E^nu, col of y^{nu-1}).
    const auto J = assemble_step(m, tr, cs, layout, nu);
    for (const auto& t : J.B) A((nu - 2) * n + t.col, (nu - 1) * n + t.row) += t.val;
  }
  const Eigen::VectorXd x = A.triangularView<Eigen::Upper>().solve(rhs);
  std::vector<std::vector<double>> xi(T + 1);
  for (int nu = 1; nu <= T; ++nu) xi[nu].assign(x.data() + (nu - 1) * n, x.data() + nu * n);
  return xi;
}

/// Gradient from explicit adjoint vectors: dJ/du + sum_nu xi^nu^T C^nu.
inline std::vector<double> gradient_from_xi(const Model& m, const Objective& obj, const Trajectory& tr,
                                            const ControlSchedule& cs, const ControlLayout& layout,
                                            const std::vector<std::vector<double>>& xi) {
  auto g = d_cost_du(m, obj, tr, cs, layout);
  for (int nu = 1; nu <= tr.steps; ++nu) {
    const auto J = assemble_step(m, tr, cs, layout, nu);
    for (const auto& t : J.C) g[t.col] += xi[nu][t.row] * t.val;
  }
  return g;
}

}  // namespace testsupport
