#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "mcflow/controls.hpp"
#include "mcflow/cost.hpp"
#include "mcflow/godunov.hpp"

namespace mcflow {

struct Triplet {
  int row = 0;
  int col = 0;
  double val = 0.0;
};

/// Sparse blocks of the step residual E^nu = y^nu - Phi(y^{nu-1}, u):
/// B = dE^nu/dy^{nu-1} and C = dE^nu/du. dE^nu/dy^nu is the identity.
/// Entries may repeat; repeated (row, col) pairs add.
struct StepJacobian {
  std::vector<Triplet> B;
  std::vector<Triplet> C;
};

namespace detail {

/// Maps a flux partial onto the rows of E that contain that flux.
class RowMap {
 public:
  RowMap(const Model& m, const ControlSchedule& cs, const ControlLayout& layout, int step,
         std::span<const std::uint8_t> tags, const StepEvaluator& ev)
      : m_(m), layout_(layout), piece_(cs.piece_of_step(step, m.grid.steps)), tags_(tags), ev_(ev) {}

  /// Calls fn(row, coefficient) for every row in which flux f appears.
  template <class Fn>
  void rows(IfaceRef f, Fn&& fn) const {
    const int n = m_.net.roads[f.road].cells;
    const double lambda = m_.grid.lambda;
    if (f.i >= 1) fn(m_.topo.cell(f.cls, f.road, f.i - 1), lambda);
    if (f.i < n) fn(m_.topo.cell(f.cls, f.road, f.i), -lambda);
    if (f.i == 0) {
      const int o = m_.topo.buffer_index[f.road];
      if (o >= 0 && ev_.buffer_tag(tags_, o, f.cls) == tag::BufferPositive)
        fn(m_.topo.buffer(f.cls, o), m_.grid.dt);
    }
  }

  /// Optimization slot and chain factor of a raw control, or slot -1.
  std::pair<int, double> slot(const ControlRef& r) const {
    if (r.kind == SlotKind::Speed) {
      const int s = layout_.speed_slot(r.owner, r.cls, piece_);
      return {s, 1.0};
    }
    return layout_.weight_slot(r.owner, r.cls, r.branch, piece_);
  }

  /// Calls fn(row) for each row of E whose dependence on y^{nu-1} includes
  /// the -1 diagonal.
  template <class Fn>
  void identity_rows(Fn&& fn) const {
    const int N = m_.classes();
    for (int c = 0; c < N; ++c) {
      for (std::size_t r = 0; r < m_.net.roads.size(); ++r)
        for (int j = 0; j < m_.net.roads[r].cells; ++j) fn(m_.topo.cell(c, static_cast<int>(r), j));
      for (int o = 0; o < m_.origin_count(); ++o)
        if (ev_.buffer_tag(tags_, o, c) == tag::BufferPositive) fn(m_.topo.buffer(c, o));
    }
  }

 private:
  const Model& m_;
  const ControlLayout& layout_;
  int piece_;
  std::span<const std::uint8_t> tags_;
  const StepEvaluator& ev_;
};

class TripletSink : public FluxPartialSink {
 public:
  TripletSink(const RowMap& map, StepJacobian& out) : map_(map), out_(out) {}
  void state(IfaceRef f, int y, double v) override {
    map_.rows(f, [&](int row, double k) { out_.B.push_back({row, y, k * v}); });
  }
  void control(IfaceRef f, ControlRef ref, double v) override {
    const auto [s, factor] = map_.slot(ref);
    if (s < 0) return;
    map_.rows(f, [&](int row, double k) { out_.C.push_back({row, s, k * v * factor}); });
  }

 private:
  const RowMap& map_;
  StepJacobian& out_;
};

/// Accumulates B^T xi and xi^T C without forming the blocks.
class TransposeSink : public FluxPartialSink {
 public:
  TransposeSink(const RowMap& map, std::span<const double> xi, std::span<double> bt_xi, std::span<double> grad)
      : map_(map), xi_(xi), bt_xi_(bt_xi), grad_(grad) {}
  void state(IfaceRef f, int y, double v) override { bt_xi_[y] += weight(f) * v; }
  void control(IfaceRef f, ControlRef ref, double v) override {
    const auto [s, factor] = map_.slot(ref);
    if (s >= 0) grad_[s] += weight(f) * v * factor;
  }

 private:
  double weight(IfaceRef f) const {
    double w = 0.0;
    map_.rows(f, [&](int row, double k) { w += k * xi_[row]; });
    return w;
  }
  const RowMap& map_;
  std::span<const double> xi_;
  std::span<double> bt_xi_;
  std::span<double> grad_;
};

}  // namespace detail

/// Assembles B^nu and C^nu (nu = 1..T) from a recorded trajectory.
inline StepJacobian assemble_step(const Model& m, const Trajectory& tr, const ControlSchedule& cs,
                                  const ControlLayout& layout, int nu) {
  if (nu < 1 || nu > tr.steps) throw std::out_of_range("assemble_step: level out of range");
  const int s = nu - 1;
  StepEvaluator ev(m);
  const auto tags = tr.step_tags(s);
  detail::RowMap map(m, cs, layout, s, tags, ev);
  StepJacobian J;
  map.identity_rows([&](int row) { J.B.push_back({row, row, -1.0}); });
  detail::TripletSink sink(map, J);
  std::vector<double> flux(m.flux_size()), inflow(m.origin_count() * m.classes());
  ev.replay(s, tr.state(s), cs.at_step(s, tr.steps), tags, flux, inflow, sink);
  return J;
}

/// Backward substitution for the block lower-bidiagonal adjoint system:
/// xi^T = -g^T, xi^nu = -g^nu - (B^{nu+1})^T xi^{nu+1}. `B[nu]` holds B^nu
/// for nu = 1..T (index 0 unused); `g[nu]` is dJ/dy^nu. Returns xi^1..xi^T
/// at indices 1..T.
inline std::vector<std::vector<double>> solve_adjoint(const std::vector<std::vector<Triplet>>& B,
                                                      const std::vector<std::vector<double>>& g) {
  const int T = static_cast<int>(g.size()) - 1;
  std::vector<std::vector<double>> xi(T + 1);
  if (T < 1) return xi;
  const std::size_t n = g[T].size();
  xi[T].assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) xi[T][i] = -g[T][i];
  for (int nu = T - 1; nu >= 1; --nu) {
    xi[nu].assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) xi[nu][i] = -g[nu][i];
    for (const auto& t : B[nu + 1]) xi[nu][t.col] -= t.val * xi[nu + 1][t.row];
  }
  return xi;
}

struct GradientReport {
  double value = 0.0;
  std::vector<double> gradient;
  /// Euclidean norm over all adjoint vectors xi^1..xi^T.
  double adjoint_norm = 0.0;
  /// Flux sites evaluated within the tie tolerance along the trajectory.
  int near_ties = 0;
};

/// Objective value and gradient w.r.t. the free controls by the discrete
/// adjoint. Blocks are replayed step by step during the backward sweep and
/// never stored.
inline GradientReport gradient(const Model& m, const Objective& obj, const ControlSchedule& cs,
                               const ControlLayout& layout, const Trajectory* precomputed = nullptr) {
  Trajectory local;
  if (!precomputed) local = simulate(m, cs);
  const Trajectory& tr = precomputed ? *precomputed : local;
  const int T = tr.steps;
  const int n = m.state_size();

  GradientReport rep;
  rep.value = evaluate(m, obj, tr, cs);
  rep.near_ties = tr.near_ties;
  rep.gradient = d_cost_du(m, obj, tr, cs, layout);

  StepEvaluator ev(m);
  std::vector<double> xi(n), next(n), g(n);
  std::vector<double> flux(m.flux_size()), inflow(m.origin_count() * m.classes());
  d_cost_dy(m, obj, tr.state(T), cs.at_step(T, T), g);
  for (int i = 0; i < n; ++i) xi[i] = -g[i];
  double norm2 = 0.0;
  for (int nu = T; nu >= 1; --nu) {
    for (double v : xi) norm2 += v * v;
    const int s = nu - 1;
    const auto tags = tr.step_tags(s);
    detail::RowMap map(m, cs, layout, s, tags, ev);
    std::fill(next.begin(), next.end(), 0.0);
    map.identity_rows([&](int row) { next[row] -= xi[row]; });
    detail::TransposeSink sink(map, xi, next, rep.gradient);
    ev.replay(s, tr.state(s), cs.at_step(s, T), tags, flux, inflow, sink);
    if (nu == 1) break;
    d_cost_dy(m, obj, tr.state(s), cs.at_step(s, T), g);
    for (int i = 0; i < n; ++i) xi[i] = -g[i] - next[i];
  }
  rep.adjoint_norm = std::sqrt(norm2);
  return rep;
}

}  // namespace mcflow
