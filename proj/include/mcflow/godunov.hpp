#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcflow/controls.hpp"
#include "mcflow/diagram.hpp"
#include "mcflow/network.hpp"

namespace mcflow {

// ---------------------------------------------------------------------------
// Branch tags
//
// Every min/max in the scheme records which argument was active. The adjoint
// replays these instead of re-deciding. The high bit marks a near tie.
// ---------------------------------------------------------------------------
namespace tag {
inline constexpr std::uint8_t Demand = 0;  // Godunov, link, non-FIFO branch, FIFO argmin
inline constexpr std::uint8_t Supply = 1;  // Godunov, link, non-FIFO branch
// merge
inline constexpr std::uint8_t MergeDemand = 0;
inline constexpr std::uint8_t MergePriority = 1;
inline constexpr std::uint8_t MergeResidual = 2;
// FIFO diverge: Demand, or FifoSupply + i for outgoing road i
inline constexpr std::uint8_t FifoSupply = 1;
// origin inflow: low two bits branch, bits 2-3 source of the class demand
inline constexpr std::uint8_t InflowDemand = 0;
inline constexpr std::uint8_t InflowShare = 1;
inline constexpr std::uint8_t InflowResidual = 2;
inline constexpr std::uint8_t SourceInflow = 0 << 2;     // empty buffer, D = F_in
inline constexpr std::uint8_t SourceSaturated = 1 << 2;  // D = Q(r_cr)
inline constexpr std::uint8_t SourceDrain = 2 << 2;      // D = l/dt + F_in (capped buffer demand)
// destination
inline constexpr std::uint8_t OutflowActive = 0;
inline constexpr std::uint8_t OutflowCapped = 1;
// buffer
inline constexpr std::uint8_t BufferPositive = 0;
inline constexpr std::uint8_t BufferClamped = 1;

inline constexpr std::uint8_t NearTie = 0x80;
inline constexpr std::uint8_t Mask = 0x7f;

inline std::uint8_t branch(std::uint8_t t) { return t & 0x03; }
inline std::uint8_t source(std::uint8_t t) { return t & 0x0c; }
}  // namespace tag

/// Relative gap below which two min/max arguments count as a near tie.
inline constexpr double kTieTolerance = 1e-6;
/// Total densities below kVacuum * R are treated as empty cells (k = 0).
inline constexpr double kVacuum = 1e-12;

inline bool near_tie(double a, double b) {
  return std::abs(a - b) <= kTieTolerance * std::max({1.0, std::abs(a), std::abs(b)});
}

/// Class fraction k = rho/r and its own-class derivative k' = (r - rho)/r^2,
/// both zero in vacuum.
struct ClassFraction {
  double k = 0.0;
  double dk = 0.0;
};

inline ClassFraction class_fraction_derivs(double rho, double r, double vacuum_threshold = 0.0) {
  if (r < 0.0) throw std::domain_error("class_fraction_derivs: negative total density");
  if (r <= vacuum_threshold || r == 0.0) return {};
  return {rho / r, (r - rho) / (r * r)};
}

/// Result of one branch decision.
struct Branch {
  double value = 0.0;
  std::uint8_t tag = 0;
};

// Per-class branch primitives shared by the simulator and the public
// junction solvers. Ties resolve toward the first listed argument.

inline Branch godunov_branch(double demand, double supply) {
  Branch b = demand <= supply ? Branch{demand, tag::Demand} : Branch{supply, tag::Supply};
  if (near_tie(demand, supply)) b.tag |= tag::NearTie;
  return b;
}

inline Branch merge_branch(double demand, double priority_share, double residual) {
  const bool prio = priority_share >= residual;
  const double beta2 = prio ? priority_share : residual;
  Branch b;
  if (demand <= beta2) {
    b = {demand, tag::MergeDemand};
    if (near_tie(demand, beta2)) b.tag |= tag::NearTie;
  } else {
    b = {beta2, prio ? tag::MergePriority : tag::MergeResidual};
    if (near_tie(demand, beta2) || near_tie(priority_share, residual)) b.tag |= tag::NearTie;
  }
  return b;
}

/// min{D, S_i/alpha_i}; a zero split imposes no restriction.
inline Branch fifo_branch(double demand, std::span<const double> supply, std::span<const double> split) {
  Branch b{demand, tag::Demand};
  double second = INFINITY;
  for (std::size_t i = 0; i < supply.size(); ++i) {
    if (!(split[i] > 0.0)) continue;
    const double q = supply[i] / split[i];
    if (q < b.value) {
      second = b.value;
      b = {q, static_cast<std::uint8_t>(tag::FifoSupply + i)};
    } else {
      second = std::min(second, q);
    }
  }
  if (std::isfinite(second) && near_tie(b.value, second)) b.tag |= tag::NearTie;
  return b;
}

inline Branch inflow_branch(double demand, double share, double residual) {
  const bool by_share = share >= residual;
  const double beta2 = by_share ? share : residual;
  Branch b;
  if (demand <= beta2) {
    b = {demand, tag::InflowDemand};
    if (near_tie(demand, beta2)) b.tag |= tag::NearTie;
  } else {
    b = {beta2, by_share ? tag::InflowShare : tag::InflowResidual};
    if (near_tie(demand, beta2) || near_tie(share, residual)) b.tag |= tag::NearTie;
  }
  return b;
}

inline Branch outflow_branch(double class_demand, double cap) {
  Branch b = class_demand <= cap ? Branch{class_demand, tag::OutflowActive} : Branch{cap, tag::OutflowCapped};
  if (near_tie(class_demand, cap)) b.tag |= tag::NearTie;
  return b;
}

/// l' = max{l + dt (F_in - gamma), 0}; the positive branch requires a strict > 0.
inline Branch buffer_branch(double l, double inflow, double gamma, double dt) {
  const double pre = l + dt * (inflow - gamma);
  Branch b = pre > 0.0 ? Branch{pre, tag::BufferPositive} : Branch{0.0, tag::BufferClamped};
  if (near_tie(pre, 0.0)) b.tag |= tag::NearTie;
  return b;
}

inline double buffer_update(double l, double inflow, double gamma, double dt) {
  return buffer_branch(l, inflow, gamma, dt).value;
}

/// How an origin buffer with a positive queue feeds its road.
enum class BufferDemand {
  /// D(l) = Q(r_cr) whenever l > 0.
  Saturated,
  /// D(l) = min{Q(r_cr), l/dt + F_in} for l > 0, so a step never removes more
  /// vehicles than the queue plus the arriving inflow.
  Capped,
};

/// Demand of an origin buffer for one class, with its source tag.
inline Branch buffer_demand(double l, double inflow, double critical_flux, double dt, BufferDemand mode) {
  if (!(l > 0.0)) return {inflow, tag::SourceInflow};
  if (mode == BufferDemand::Capped) {
    const double drain = l / dt + inflow;
    if (drain < critical_flux) return {drain, tag::SourceDrain};
  }
  return {critical_flux, tag::SourceSaturated};
}

// ---------------------------------------------------------------------------
// Vector-level junction solvers (one entry per class). These are the public
// forms of the flux rules; the simulator composes the same primitives.
// ---------------------------------------------------------------------------

namespace detail {
inline double total(std::span<const double> rho) {
  double r = 0.0;
  for (double x : rho) r += x;
  return r;
}
inline double vacuum_threshold(std::span<const Greenshields> d) {
  double R = 0.0;
  for (const auto& g : d) R = std::max(R, g.R);
  return kVacuum * R;
}
inline void check_in_set(std::span<const double> rho, std::span<const Greenshields> d) {
  double r = 0.0, R = 0.0;
  for (std::size_t c = 0; c < rho.size(); ++c) {
    if (rho[c] < -1e-12 || rho[c] > d[c].R + 1e-12) throw std::domain_error("state outside the invariant set");
    r += rho[c];
    R = std::max(R, d[c].R);
  }
  if (r > R + 1e-12) throw std::domain_error("state outside the invariant set");
}
}  // namespace detail

/// Multi-class Godunov flux between two cells with possibly different
/// diagrams (covers interior interfaces and 1x1 links).
inline std::vector<double> link11_flux(std::span<const double> up, std::span<const double> down,
                                       std::span<const Greenshields> d_up, std::span<const Greenshields> d_down,
                                       std::vector<std::uint8_t>* tags = nullptr) {
  detail::check_in_set(up, d_up);
  detail::check_in_set(down, d_down);
  const double ru = detail::total(up), rd = detail::total(down);
  const double eps = detail::vacuum_threshold(d_up);
  std::vector<double> f(up.size());
  if (tags) tags->assign(up.size(), 0);
  for (std::size_t c = 0; c < up.size(); ++c) {
    const auto b = godunov_branch(d_up[c].demand(ru), d_down[c].supply(rd));
    f[c] = class_fraction_derivs(up[c], ru, eps).k * b.value;
    if (tags) (*tags)[c] = b.tag;
  }
  return f;
}

inline std::vector<double> interior_flux(std::span<const double> up, std::span<const double> down,
                                         std::span<const Greenshields> d, std::vector<std::uint8_t>* tags = nullptr) {
  return link11_flux(up, down, d, d, tags);
}

struct MergeFlux {
  std::vector<std::vector<double>> out;  // [incoming][class]
  std::vector<double> in;                // [class], into the outgoing road
  std::vector<std::vector<std::uint8_t>> tags;
};

/// M x 1 merge. `priority[c]` is a stochastic vector over incoming roads.
inline MergeFlux merge_flux(const std::vector<std::vector<double>>& incoming, std::span<const double> outgoing,
                            const std::vector<std::vector<double>>& priority,
                            const std::vector<std::vector<Greenshields>>& d_in, std::span<const Greenshields> d_out) {
  const std::size_t M = incoming.size(), N = outgoing.size();
  for (const auto& p : priority) {
    double s = 0.0;
    for (double x : p) {
      if (x < 0.0) throw std::invalid_argument("merge priorities must be non-negative");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("merge priorities must sum to one");
  }
  const double ro = detail::total(outgoing);
  MergeFlux res;
  res.out.assign(M, std::vector<double>(N, 0.0));
  res.in.assign(N, 0.0);
  res.tags.assign(M, std::vector<std::uint8_t>(N, 0));
  std::vector<double> ri(M);
  for (std::size_t i = 0; i < M; ++i) ri[i] = detail::total(incoming[i]);
  for (std::size_t c = 0; c < N; ++c) {
    const double S = d_out[c].supply(ro);
    std::vector<double> D(M);
    for (std::size_t i = 0; i < M; ++i) D[i] = d_in[i][c].demand(ri[i]);
    for (std::size_t i = 0; i < M; ++i) {
      double others = 0.0;
      for (std::size_t j = 0; j < M; ++j)
        if (j != i) others += D[j];
      const auto b = merge_branch(D[i], priority[c][i] * S, S - others);
      const double k = class_fraction_derivs(incoming[i][c], ri[i], detail::vacuum_threshold(d_in[i])).k;
      res.out[i][c] = k * b.value;
      res.in[c] += res.out[i][c];
      res.tags[i][c] = b.tag;
    }
  }
  return res;
}

struct DivergeFlux {
  std::vector<double> out;              // [class], leaving the incoming road
  std::vector<std::vector<double>> in;  // [outgoing][class]
  std::vector<std::vector<std::uint8_t>> tags;  // FIFO: [0][class]; non-FIFO: [outgoing][class]
};

/// 1 x M FIFO diverge. `split[c]` is a stochastic vector over outgoing roads.
inline DivergeFlux fifo_diverge_flux(std::span<const double> incoming, const std::vector<std::vector<double>>& outgoing,
                                     const std::vector<std::vector<double>>& split, std::span<const Greenshields> d_in,
                                     const std::vector<std::vector<Greenshields>>& d_out) {
  const std::size_t M = outgoing.size(), N = incoming.size();
  const double ri = detail::total(incoming);
  DivergeFlux res;
  res.out.assign(N, 0.0);
  res.in.assign(M, std::vector<double>(N, 0.0));
  res.tags.assign(1, std::vector<std::uint8_t>(N, 0));
  for (std::size_t c = 0; c < N; ++c) {
    std::vector<double> S(M);
    for (std::size_t i = 0; i < M; ++i) S[i] = d_out[i][c].supply(detail::total(outgoing[i]));
    const auto b = fifo_branch(d_in[c].demand(ri), S, split[c]);
    res.out[c] = class_fraction_derivs(incoming[c], ri, detail::vacuum_threshold(d_in)).k * b.value;
    for (std::size_t i = 0; i < M; ++i) res.in[i][c] = split[c][i] * res.out[c];
    res.tags[0][c] = b.tag;
  }
  return res;
}

/// 1 x M non-FIFO diverge.
inline DivergeFlux nonfifo_diverge_flux(std::span<const double> incoming,
                                        const std::vector<std::vector<double>>& outgoing,
                                        const std::vector<std::vector<double>>& split,
                                        std::span<const Greenshields> d_in,
                                        const std::vector<std::vector<Greenshields>>& d_out) {
  const std::size_t M = outgoing.size(), N = incoming.size();
  const double ri = detail::total(incoming);
  DivergeFlux res;
  res.out.assign(N, 0.0);
  res.in.assign(M, std::vector<double>(N, 0.0));
  res.tags.assign(M, std::vector<std::uint8_t>(N, 0));
  for (std::size_t c = 0; c < N; ++c) {
    const double D = d_in[c].demand(ri);
    const double k = class_fraction_derivs(incoming[c], ri, detail::vacuum_threshold(d_in)).k;
    for (std::size_t i = 0; i < M; ++i) {
      const auto b = godunov_branch(split[c][i] * D, d_out[i][c].supply(detail::total(outgoing[i])));
      res.in[i][c] = k * b.value;
      res.out[c] += res.in[i][c];
      res.tags[i][c] = b.tag;
    }
  }
  return res;
}

/// Inflow from an origin buffer into the first cell of its road.
inline std::vector<double> origin_inflow(std::span<const double> buffer, std::span<const double> first_cell,
                                         std::span<const double> inflow, std::span<const Greenshields> d,
                                         double dt = 1.0, BufferDemand mode = BufferDemand::Saturated,
                                         std::vector<std::uint8_t>* tags = nullptr) {
  const std::size_t N = buffer.size();
  const double r = detail::total(first_cell);
  std::vector<double> D(N), g(N);
  std::vector<std::uint8_t> src(N);
  for (std::size_t c = 0; c < N; ++c) {
    const auto b = buffer_demand(buffer[c], inflow[c], d[c].critical_flux(), dt, mode);
    D[c] = b.value;
    src[c] = b.tag;
  }
  if (tags) tags->assign(N, 0);
  for (std::size_t c = 0; c < N; ++c) {
    const double S = d[c].supply(r);
    double others = 0.0;
    for (std::size_t h = 0; h < N; ++h)
      if (h != c) others += D[h];
    const auto b = inflow_branch(D[c], S / static_cast<double>(N), S - others);
    g[c] = b.value;
    if (tags) (*tags)[c] = b.tag | src[c];
  }
  return g;
}

/// Capped outflow through a destination.
inline std::vector<double> destination_outflow(std::span<const double> last_cell, std::span<const double> cap,
                                               std::span<const Greenshields> d) {
  const double r = detail::total(last_cell);
  std::vector<double> g(last_cell.size());
  for (std::size_t c = 0; c < last_cell.size(); ++c) {
    const double k = class_fraction_derivs(last_cell[c], r, detail::vacuum_threshold(d)).k;
    g[c] = outflow_branch(k * d[c].demand(r), cap[c]).value;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Network simulator
// ---------------------------------------------------------------------------

/// Offsets of the branch tags recorded per time step.
struct TagLayout {
  std::vector<int> road;      // first interior-interface tag of each road
  std::vector<int> junction;  // first tag of each junction
  int size = 0;

  TagLayout() = default;
  TagLayout(const Network& net, const Topology& topo) {
    const int N = net.classes;
    for (const auto& r : net.roads) {
      road.push_back(size);
      size += (r.cells - 1) * N;
    }
    for (const auto& j : net.junctions) {
      junction.push_back(size);
      switch (j.kind) {
        case JunctionKind::Link:
        case JunctionKind::DivergeFifo:
        case JunctionKind::Destination: size += N; break;
        case JunctionKind::Merge: size += N * static_cast<int>(j.in.size()); break;
        case JunctionKind::DivergeNonFifo: size += N * static_cast<int>(j.out.size()); break;
        case JunctionKind::Origin: size += 2 * N; break;  // inflow, then buffer
      }
    }
    (void)topo;
  }
  /// Interior interface i (1..N_l-1) of a road.
  int interior(int r, int i, int c, int N) const { return road[r] + (i - 1) * N + c; }
};

/// A validated network with its derived indexing and time grid.
struct Model {
  Network net;
  Topology topo;
  TagLayout tags;
  GridSpec grid;
  BufferDemand buffer_demand = BufferDemand::Capped;

  explicit Model(Network n, BufferDemand mode = BufferDemand::Capped)
      : net((require_valid(n), std::move(n))), topo(net), tags(net, topo), grid(cfl_grid(net)), buffer_demand(mode) {}
  Model(Network n, GridSpec g, BufferDemand mode = BufferDemand::Capped)
      : net((require_valid(n), std::move(n))), topo(net), tags(net, topo), grid(g), buffer_demand(mode) {}

  int classes() const { return net.classes; }
  int state_size() const { return topo.size(); }
  int flux_size() const { return topo.classes * topo.ifaces; }
  int origin_count() const { return static_cast<int>(topo.origin_roads.size()); }
};

/// Full forward solution: T+1 states, and per step the interface fluxes and
/// the branch tags that produced them.
struct Trajectory {
  int steps = 0;
  int state_size = 0;
  int flux_size = 0;
  int tag_size = 0;
  std::vector<double> y;              // (T+1) * state_size
  std::vector<double> flux;           // T * flux_size
  std::vector<double> inflow;         // T * (origins * N), F_in used at each step
  std::vector<std::uint8_t> tags;     // T * tag_size
  int near_ties = 0;

  std::span<const double> state(int nu) const {
    return {y.data() + static_cast<std::size_t>(nu) * state_size, static_cast<std::size_t>(state_size)};
  }
  std::span<double> state(int nu) {
    return {y.data() + static_cast<std::size_t>(nu) * state_size, static_cast<std::size_t>(state_size)};
  }
  std::span<const double> fluxes(int step) const {
    return {flux.data() + static_cast<std::size_t>(step) * flux_size, static_cast<std::size_t>(flux_size)};
  }
  std::span<const std::uint8_t> step_tags(int step) const {
    return {tags.data() + static_cast<std::size_t>(step) * tag_size, static_cast<std::size_t>(tag_size)};
  }
};

/// Raw control parameter touched by a flux partial.
struct ControlRef {
  SlotKind kind = SlotKind::Weight;
  int owner = 0;   // junction (Weight) or road (Speed)
  int cls = 0;
  int branch = 0;
};

/// Identifies interface i (0..N_l) of a road for class c.
struct IfaceRef {
  int cls = 0;
  int road = 0;
  int i = 0;
};

/// Receives flux partials during a derivative replay.
class FluxPartialSink {
 public:
  virtual ~FluxPartialSink() = default;
  virtual void state(IfaceRef f, int y_index, double value) = 0;
  virtual void control(IfaceRef f, ControlRef ref, double value) = 0;
};

/// Evaluates every interface flux of one time step. In forward mode branch
/// decisions are made and recorded; in replay mode the recorded tags are
/// reused and the partial derivatives of each flux are emitted to a sink.
class StepEvaluator {
 public:
  explicit StepEvaluator(const Model& m) : m_(m), N_(m.net.classes) {
    rsum_.resize(m.topo.M);
    diag_.resize(m.net.roads.size() * N_);
    eps_.resize(m.net.roads.size());
    for (std::size_t r = 0; r < m.net.roads.size(); ++r) eps_[r] = kVacuum * m.net.roads[r].total_jam_density();
  }

  /// Forward step nu -> nu+1. Returns the number of near-tie sites.
  int forward(int nu, std::span<const double> y, const ControlSnapshot& snap, std::span<double> flux,
              std::span<std::uint8_t> tags, std::span<double> inflow, std::span<double> y_next) {
    prepare(nu, y, snap);
    tags_ = tags;
    replay_ = false;
    sink_ = nullptr;
    ties_ = 0;
    flux_ = flux;
    inflow_ = inflow;
    evaluate();
    advance(y_next);
    return ties_;
  }

  /// Recomputes the fluxes of step nu with recorded tags, emitting partials.
  void replay(int nu, std::span<const double> y, const ControlSnapshot& snap, std::span<const std::uint8_t> tags,
              std::span<double> flux, std::span<double> inflow, FluxPartialSink& sink) {
    prepare(nu, y, snap);
    rtags_ = tags;
    replay_ = true;
    sink_ = &sink;
    flux_ = flux;
    inflow_ = inflow;
    evaluate();
  }

  /// Buffer tag of origin o, class c in a recorded tag vector.
  std::uint8_t buffer_tag(std::span<const std::uint8_t> tags, int o, int c) const {
    return tags[m_.tags.junction[m_.topo.origin_junction[o]] + N_ + c] & tag::Mask;
  }

 private:
  void prepare(int nu, std::span<const double> y, const ControlSnapshot& snap) {
    nu_ = nu;
    y_ = y;
    snap_ = &snap;
    t_ = m_.grid.time(nu);
    const auto& net = m_.net;
    for (std::size_t r = 0; r < net.roads.size(); ++r) {
      for (int c = 0; c < N_; ++c) diag_[r * N_ + c] = {snap.speed[r][c], net.roads[r].per_class[c].r_max};
      const int off = m_.topo.cell_offset[r];
      for (int j = 0; j < net.roads[r].cells; ++j) {
        double s = 0.0;
        for (int c = 0; c < N_; ++c) s += y[c * m_.topo.M + off + j];
        rsum_[off + j] = s;
      }
    }
  }

  const Greenshields& diag(int road, int c) const { return diag_[road * N_ + c]; }
  double rho(int c, int road, int j) const { return y_[m_.topo.cell(c, road, j)]; }
  double rtot(int road, int j) const { return rsum_[m_.topo.cell_offset[road] + j]; }
  ClassFraction frac(int c, int road, int j) const {
    return class_fraction_derivs(rho(c, road, j), rtot(road, j), eps_[road]);
  }
  bool vacuum(int road, int j) const { return rtot(road, j) <= eps_[road] || rtot(road, j) == 0.0; }

  std::uint8_t decide(int slot, std::uint8_t decided) {
    if (replay_) return rtags_[slot] & tag::Mask;
    tags_[slot] = decided;
    if (decided & tag::NearTie) ++ties_;
    return decided & tag::Mask;
  }

  void set_flux(IfaceRef f, double v) { flux_[m_.topo.iface(f.cls, f.road, f.i)] = v; }

  // -- partial emission helpers (replay mode only) ---------------------------
  struct Partial {
    int y = -1;  // state index, or -1 for a control partial
    ControlRef ref;
    double v = 0.0;
  };
  std::vector<Partial> scratch_;

  void d_state(int yi, double v) {
    if (v != 0.0) scratch_.push_back({yi, {}, v});
  }
  void d_control(ControlRef ref, double v) {
    if (v != 0.0) scratch_.push_back({-1, ref, v});
  }
  /// d/d rho^g of (k^c * m) + k^c * dm/dr for every class g in cell (road, j).
  void d_fraction_times(int c, int road, int j, double m, double k_dm_dr) {
    const double r = rtot(road, j);
    if (vacuum(road, j)) return;
    const double k = rho(c, road, j) / r;
    for (int g = 0; g < N_; ++g) {
      const double dk = ((g == c ? 1.0 : 0.0) - k) / r;
      d_state(m_.topo.cell(g, road, j), dk * m + k_dm_dr);
    }
  }
  /// Same coefficient for every class g of cell (road, j): quantities that
  /// depend on the cell only through its total density.
  void d_total(int road, int j, double v) {
    if (v == 0.0) return;
    for (int g = 0; g < N_; ++g) d_state(m_.topo.cell(g, road, j), v);
  }
  void emit(IfaceRef f, double scale, std::size_t begin = 0) {
    for (std::size_t p = begin; p < scratch_.size(); ++p) {
      const auto& q = scratch_[p];
      if (q.y >= 0) sink_->state(f, q.y, scale * q.v);
      else sink_->control(f, q.ref, scale * q.v);
    }
  }
  static ControlRef speed(int road, int c) { return {SlotKind::Speed, road, c, 0}; }
  static ControlRef weight(int j, int c, int b) { return {SlotKind::Weight, j, c, b}; }

  // -- flux sites -------------------------------------------------------------
  void evaluate() {
    const auto& net = m_.net;
    for (std::size_t r = 0; r < net.roads.size(); ++r) {
      const int road = static_cast<int>(r);
      for (int i = 1; i < net.roads[r].cells; ++i)
        for (int c = 0; c < N_; ++c)
          godunov(c, road, i - 1, road, i, {c, road, i}, m_.tags.interior(road, i, c, N_));
    }
    for (std::size_t ji = 0; ji < net.junctions.size(); ++ji) {
      const auto& j = net.junctions[ji];
      const int base = m_.tags.junction[ji];
      switch (j.kind) {
        case JunctionKind::Link: {
          const int a = j.in[0], b = j.out[0];
          for (int c = 0; c < N_; ++c) {
            godunov(c, a, net.roads[a].cells - 1, b, 0, {c, a, net.roads[a].cells}, base + c);
            set_flux({c, b, 0}, flux_[m_.topo.iface(c, a, net.roads[a].cells)]);
            if (replay_) emit({c, b, 0}, 1.0);
          }
          break;
        }
        case JunctionKind::Merge: merge(static_cast<int>(ji), base); break;
        case JunctionKind::DivergeFifo: fifo(static_cast<int>(ji), base); break;
        case JunctionKind::DivergeNonFifo: nonfifo(static_cast<int>(ji), base); break;
        case JunctionKind::Origin: origin(static_cast<int>(ji), base); break;
        case JunctionKind::Destination: destination(static_cast<int>(ji), base); break;
      }
    }
  }

  /// Godunov flux from (road_a, cell ja) to (road_b, cell jb) for class c.
  void godunov(int c, int ra, int ja, int rb, int jb, IfaceRef f, int slot) {
    const auto& da = diag(ra, c);
    const auto& db = diag(rb, c);
    const double r_a = rtot(ra, ja), r_b = rtot(rb, jb);
    const double D = da.demand(r_a), S = db.supply(r_b);
    const auto t = decide(slot, godunov_branch(D, S).tag);
    const double m = t == tag::Demand ? D : S;
    const auto kf = frac(c, ra, ja);
    set_flux(f, kf.k * m);
    if (!replay_) return;
    scratch_.clear();
    if (vacuum(ra, ja)) return;
    if (t == tag::Demand) {
      d_fraction_times(c, ra, ja, m, kf.k * da.d_demand_dr(r_a));
      d_control(speed(ra, c), kf.k * da.d_demand_dV(r_a));
    } else {
      d_fraction_times(c, ra, ja, m, 0.0);
      d_total(rb, jb, kf.k * db.d_supply_dr(r_b));
      d_control(speed(rb, c), kf.k * db.d_supply_dV(r_b));
    }
    emit(f, 1.0);
  }

  void merge(int ji, int base) {
    const auto& j = m_.net.junctions[ji];
    const int M = static_cast<int>(j.in.size());
    const int out = j.out[0];
    const double r_b = rtot(out, 0);
    for (int c = 0; c < N_; ++c) {
      const auto& db = diag(out, c);
      const double S = db.supply(r_b);
      dem_.assign(M, 0.0);
      for (int i = 0; i < M; ++i) {
        const int a = j.in[i];
        dem_[i] = diag(a, c).demand(rtot(a, m_.net.roads[a].cells - 1));
      }
      double total_in = 0.0;
      if (replay_) in_scratch_.clear();
      for (int i = 0; i < M; ++i) {
        const int a = j.in[i];
        const int ja = m_.net.roads[a].cells - 1;
        double others = 0.0;
        for (int q = 0; q < M; ++q)
          if (q != i) others += dem_[q];
        const double p = snap_->weights[ji][c][i];
        const double resid = S - others;
        const auto t = tag::branch(decide(base + i * N_ + c, merge_branch(dem_[i], p * S, resid).tag));
        const double beta = t == tag::MergeDemand ? dem_[i] : (t == tag::MergePriority ? p * S : resid);
        const auto kf = frac(c, a, ja);
        const double g = kf.k * beta;
        set_flux({c, a, ja + 1}, g);
        total_in += g;
        if (!replay_) continue;
        scratch_.clear();
        if (!vacuum(a, ja)) {
          const double ra = rtot(a, ja);
          if (t == tag::MergeDemand) {
            d_fraction_times(c, a, ja, beta, kf.k * diag(a, c).d_demand_dr(ra));
            d_control(speed(a, c), kf.k * diag(a, c).d_demand_dV(ra));
          } else if (t == tag::MergePriority) {
            d_fraction_times(c, a, ja, beta, 0.0);
            d_total(out, 0, kf.k * p * db.d_supply_dr(r_b));
            d_control(weight(ji, c, i), kf.k * S);
            d_control(speed(out, c), kf.k * p * db.d_supply_dV(r_b));
          } else {
            d_fraction_times(c, a, ja, beta, 0.0);
            d_total(out, 0, kf.k * db.d_supply_dr(r_b));
            d_control(speed(out, c), kf.k * db.d_supply_dV(r_b));
            for (int q = 0; q < M; ++q) {
              if (q == i) continue;
              const int aq = j.in[q];
              const int jq = m_.net.roads[aq].cells - 1;
              d_total(aq, jq, -kf.k * diag(aq, c).d_demand_dr(rtot(aq, jq)));
              d_control(speed(aq, c), -kf.k * diag(aq, c).d_demand_dV(rtot(aq, jq)));
            }
          }
        }
        emit({c, a, ja + 1}, 1.0);
        in_scratch_.insert(in_scratch_.end(), scratch_.begin(), scratch_.end());
      }
      set_flux({c, out, 0}, total_in);
      if (replay_) {
        scratch_.swap(in_scratch_);
        emit({c, out, 0}, 1.0);
      }
    }
  }

  void fifo(int ji, int base) {
    const auto& j = m_.net.junctions[ji];
    const int M = static_cast<int>(j.out.size());
    const int a = j.in[0];
    const int ja = m_.net.roads[a].cells - 1;
    const double r_a = rtot(a, ja);
    for (int c = 0; c < N_; ++c) {
      const auto& da = diag(a, c);
      const double D = da.demand(r_a);
      sup_.assign(M, 0.0);
      for (int i = 0; i < M; ++i) sup_[i] = diag(j.out[i], c).supply(rtot(j.out[i], 0));
      const auto& alpha = snap_->weights[ji][c];
      const auto t = decide(base + c, fifo_branch(D, sup_, alpha).tag);
      const double beta = t == tag::Demand ? D : sup_[t - tag::FifoSupply] / alpha[t - tag::FifoSupply];
      const auto kf = frac(c, a, ja);
      const double gout = kf.k * beta;
      set_flux({c, a, ja + 1}, gout);
      for (int i = 0; i < M; ++i) set_flux({c, j.out[i], 0}, alpha[i] * gout);
      if (!replay_) continue;
      scratch_.clear();
      if (!vacuum(a, ja)) {
        if (t == tag::Demand) {
          d_fraction_times(c, a, ja, beta, kf.k * da.d_demand_dr(r_a));
          d_control(speed(a, c), kf.k * da.d_demand_dV(r_a));
        } else {
          const int i = t - tag::FifoSupply;
          const int b = j.out[i];
          const auto& db = diag(b, c);
          d_fraction_times(c, a, ja, beta, 0.0);
          d_total(b, 0, kf.k * db.d_supply_dr(rtot(b, 0)) / alpha[i]);
          d_control(weight(ji, c, i), -kf.k * sup_[i] / (alpha[i] * alpha[i]));
          d_control(speed(b, c), kf.k * db.d_supply_dV(rtot(b, 0)) / alpha[i]);
        }
      }
      emit({c, a, ja + 1}, 1.0);
      // gamma_in_i = alpha_i * gamma_out
      for (int i = 0; i < M; ++i) {
        emit({c, j.out[i], 0}, alpha[i]);
        if (gout != 0.0) sink_->control({c, j.out[i], 0}, weight(ji, c, i), gout);
      }
    }
  }

  void nonfifo(int ji, int base) {
    const auto& j = m_.net.junctions[ji];
    const int M = static_cast<int>(j.out.size());
    const int a = j.in[0];
    const int ja = m_.net.roads[a].cells - 1;
    const double r_a = rtot(a, ja);
    for (int c = 0; c < N_; ++c) {
      const auto& da = diag(a, c);
      const double D = da.demand(r_a);
      const auto& alpha = snap_->weights[ji][c];
      const auto kf = frac(c, a, ja);
      double gout = 0.0;
      if (replay_) in_scratch_.clear();
      for (int i = 0; i < M; ++i) {
        const int b = j.out[i];
        const auto& db = diag(b, c);
        const double S = db.supply(rtot(b, 0));
        const auto t = decide(base + i * N_ + c, godunov_branch(alpha[i] * D, S).tag);
        const double m = t == tag::Demand ? alpha[i] * D : S;
        const double g = kf.k * m;
        set_flux({c, b, 0}, g);
        gout += g;
        if (!replay_) continue;
        scratch_.clear();
        if (!vacuum(a, ja)) {
          if (t == tag::Demand) {
            d_fraction_times(c, a, ja, m, kf.k * alpha[i] * da.d_demand_dr(r_a));
            d_control(weight(ji, c, i), kf.k * D);
            d_control(speed(a, c), kf.k * alpha[i] * da.d_demand_dV(r_a));
          } else {
            d_fraction_times(c, a, ja, m, 0.0);
            d_total(b, 0, kf.k * db.d_supply_dr(rtot(b, 0)));
            d_control(speed(b, c), kf.k * db.d_supply_dV(rtot(b, 0)));
          }
        }
        emit({c, b, 0}, 1.0);
        in_scratch_.insert(in_scratch_.end(), scratch_.begin(), scratch_.end());
      }
      set_flux({c, a, ja + 1}, gout);
      if (replay_) {
        scratch_.swap(in_scratch_);
        emit({c, a, ja + 1}, 1.0);
      }
    }
  }

  void origin(int ji, int base) {
    const auto& j = m_.net.junctions[ji];
    const int road = j.out[0];
    const int o = m_.topo.buffer_index[road];
    const double r_b = rtot(road, 0);
    const double dt = m_.grid.dt;
    dem_.assign(N_, 0.0);
    src_.assign(N_, 0);
    fin_.assign(N_, 0.0);
    for (int c = 0; c < N_; ++c) {
      fin_[c] = j.inflow_at(c, t_);
      inflow_[o * N_ + c] = fin_[c];
      const double l = y_[m_.topo.buffer(c, o)];
      const auto b = buffer_demand(l, fin_[c], diag(road, c).critical_flux(), dt, m_.buffer_demand);
      if (replay_) {
        src_[c] = tag::source(rtags_[base + c]);
        dem_[c] = src_[c] == tag::SourceInflow ? fin_[c]
                  : src_[c] == tag::SourceDrain ? l / dt + fin_[c]
                                                : diag(road, c).critical_flux();
      } else {
        src_[c] = b.tag;
        dem_[c] = b.value;
      }
    }
    for (int c = 0; c < N_; ++c) {
      const auto& db = diag(road, c);
      const double S = db.supply(r_b);
      double others = 0.0;
      for (int g = 0; g < N_; ++g)
        if (g != c) others += dem_[g];
      const double share = S / N_;
      const double resid = S - others;
      std::uint8_t t;
      if (replay_) {
        t = tag::branch(rtags_[base + c]);
      } else {
        const auto b = inflow_branch(dem_[c], share, resid);
        tags_[base + c] = b.tag | src_[c];
        if (b.tag & tag::NearTie) ++ties_;
        t = tag::branch(b.tag);
      }
      const double gamma = t == tag::InflowDemand ? dem_[c] : (t == tag::InflowShare ? share : resid);
      set_flux({c, road, 0}, gamma);
      if (replay_) {
        scratch_.clear();
        if (t == tag::InflowDemand) {
          demand_partials(c, road, o, 1.0);
        } else if (t == tag::InflowShare) {
          d_total(road, 0, db.d_supply_dr(r_b) / N_);
          d_control(speed(road, c), db.d_supply_dV(r_b) / N_);
        } else {
          d_total(road, 0, db.d_supply_dr(r_b));
          d_control(speed(road, c), db.d_supply_dV(r_b));
          for (int g = 0; g < N_; ++g)
            if (g != c) demand_partials(g, road, o, -1.0);
        }
        emit({c, road, 0}, 1.0);
      }
      // Buffer update decision (the step itself applies it in `advance`).
      if (!replay_) {
        const double l = y_[m_.topo.buffer(c, o)];
        const auto bb = buffer_branch(l, fin_[c], gamma, dt);
        tags_[base + N_ + c] = bb.tag;
        if (bb.tag & tag::NearTie) ++ties_;
      }
    }
  }

  void demand_partials(int g, int road, int o, double sign) {
    if (src_[g] == tag::SourceDrain) d_state(m_.topo.buffer(g, o), sign / m_.grid.dt);
    else if (src_[g] == tag::SourceSaturated) d_control(speed(road, g), sign * diag(road, g).d_critical_flux_dV());
  }

  void destination(int ji, int base) {
    const auto& j = m_.net.junctions[ji];
    const int a = j.in[0];
    const int ja = m_.net.roads[a].cells - 1;
    const double r_a = rtot(a, ja);
    for (int c = 0; c < N_; ++c) {
      const auto& da = diag(a, c);
      const double D = da.demand(r_a);
      const auto kf = frac(c, a, ja);
      const auto t = decide(base + c, outflow_branch(kf.k * D, j.outflow_cap[c]).tag);
      set_flux({c, a, ja + 1}, t == tag::OutflowActive ? kf.k * D : j.outflow_cap[c]);
      if (!replay_) continue;
      scratch_.clear();
      if (t == tag::OutflowActive && !vacuum(a, ja)) {
        d_fraction_times(c, a, ja, D, kf.k * da.d_demand_dr(r_a));
        d_control(speed(a, c), kf.k * da.d_demand_dV(r_a));
      }
      emit({c, a, ja + 1}, 1.0);
    }
  }

  /// Conservative update of every cell and buffer.
  void advance(std::span<double> y_next) {
    const auto& net = m_.net;
    const auto& topo = m_.topo;
    const double lambda = m_.grid.lambda;
    for (std::size_t r = 0; r < net.roads.size(); ++r) {
      const int road = static_cast<int>(r);
      const int n = net.roads[r].cells;
      for (int c = 0; c < N_; ++c) {
        const double* F = flux_.data() + topo.iface(c, road, 0);
        for (int jj = 0; jj < n; ++jj) {
          const int idx = topo.cell(c, road, jj);
          y_next[idx] = y_[idx] - lambda * (F[jj + 1] - F[jj]);
        }
      }
    }
    for (int o = 0; o < m_.origin_count(); ++o) {
      const int road = topo.origin_roads[o];
      for (int c = 0; c < N_; ++c) {
        const int idx = topo.buffer(c, o);
        const double gamma = flux_[topo.iface(c, road, 0)];
        y_next[idx] = buffer_branch(y_[idx], inflow_[o * N_ + c], gamma, m_.grid.dt).value;
      }
    }
  }

  const Model& m_;
  int N_;
  int nu_ = 0;
  double t_ = 0.0;
  std::span<const double> y_;
  const ControlSnapshot* snap_ = nullptr;
  std::span<double> flux_;
  std::span<double> inflow_;
  std::span<std::uint8_t> tags_;
  std::span<const std::uint8_t> rtags_;
  bool replay_ = false;
  FluxPartialSink* sink_ = nullptr;
  int ties_ = 0;
  std::vector<double> rsum_;
  std::vector<Greenshields> diag_;
  std::vector<double> eps_;
  std::vector<double> dem_, sup_, fin_;
  std::vector<std::uint8_t> src_;
  std::vector<Partial> in_scratch_;
};

/// Absolute slack allowed on the invariant-set bounds.
inline constexpr double kInvariantSlack = 1e-12;

/// Throws std::runtime_error if any cell leaves the invariant set or a
/// buffer turns negative.
inline void check_state(const Model& m, std::span<const double> y, int nu) {
  const auto& net = m.net;
  for (std::size_t r = 0; r < net.roads.size(); ++r) {
    const double R = net.roads[r].total_jam_density();
    for (int j = 0; j < net.roads[r].cells; ++j) {
      double tot = 0.0;
      for (int c = 0; c < net.classes; ++c) {
        const double v = y[m.topo.cell(c, static_cast<int>(r), j)];
        if (v < -kInvariantSlack || v > net.roads[r].per_class[c].r_max + kInvariantSlack)
          throw std::runtime_error("density left the invariant set at step " + std::to_string(nu) + " on road '" +
                                   net.roads[r].id + "' cell " + std::to_string(j + 1));
        tot += v;
      }
      if (tot > R + kInvariantSlack)
        throw std::runtime_error("total density exceeds jam density at step " + std::to_string(nu) + " on road '" +
                                 net.roads[r].id + "' cell " + std::to_string(j + 1));
    }
  }
  for (int o = 0; o < m.origin_count(); ++o)
    for (int c = 0; c < net.classes; ++c)
      if (y[m.topo.buffer(c, o)] < 0.0) throw std::runtime_error("negative buffer length");
}

struct StepRecord {
  std::vector<double> y_next;
  std::vector<double> flux;
  std::vector<double> inflow;
  std::vector<std::uint8_t> tags;
  int near_ties = 0;
};

/// One time step from state y at level nu with the given controls.
inline StepRecord step(const Model& m, int nu, std::span<const double> y, const ControlSnapshot& snap) {
  StepRecord rec;
  rec.y_next.resize(m.state_size());
  rec.flux.resize(m.flux_size());
  rec.inflow.resize(m.origin_count() * m.classes());
  rec.tags.resize(m.tags.size);
  StepEvaluator ev(m);
  rec.near_ties = ev.forward(nu, y, snap, rec.flux, rec.tags, rec.inflow, rec.y_next);
  check_state(m, rec.y_next, nu + 1);
  return rec;
}

struct SimulateOptions {
  /// Verify the invariant set after every step.
  bool check_invariants = true;
};

/// Runs the scheme over all T steps. `y0` defaults to the empty network.
inline Trajectory simulate(const Model& m, const ControlSchedule& controls, std::span<const double> y0 = {},
                           SimulateOptions opt = {}) {
  const int T = m.grid.steps;
  Trajectory tr;
  tr.steps = T;
  tr.state_size = m.state_size();
  tr.flux_size = m.flux_size();
  tr.tag_size = m.tags.size;
  tr.y.assign(static_cast<std::size_t>(T + 1) * tr.state_size, 0.0);
  tr.flux.assign(static_cast<std::size_t>(T) * tr.flux_size, 0.0);
  const int nin = m.origin_count() * m.classes();
  tr.inflow.assign(static_cast<std::size_t>(T) * nin, 0.0);
  tr.tags.assign(static_cast<std::size_t>(T) * tr.tag_size, 0);
  if (!y0.empty()) {
    if (static_cast<int>(y0.size()) != tr.state_size) throw std::invalid_argument("initial state size mismatch");
    std::copy(y0.begin(), y0.end(), tr.y.begin());
    check_state(m, y0, 0);
  }
  StepEvaluator ev(m);
  for (int nu = 0; nu < T; ++nu) {
    const auto& snap = controls.at_step(nu, T);
    std::span<double> flux(tr.flux.data() + static_cast<std::size_t>(nu) * tr.flux_size, tr.flux_size);
    std::span<std::uint8_t> tags(tr.tags.data() + static_cast<std::size_t>(nu) * tr.tag_size, tr.tag_size);
    std::span<double> inflow(tr.inflow.data() + static_cast<std::size_t>(nu) * nin, nin);
    tr.near_ties += ev.forward(nu, tr.state(nu), snap, flux, tags, inflow, tr.state(nu + 1));
    if (opt.check_invariants) check_state(m, tr.state(nu + 1), nu + 1);
  }
  return tr;
}

}  // namespace mcflow
