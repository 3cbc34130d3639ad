#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcflow/diagram.hpp"

namespace mcflow {

struct ClassParams {
  double v_max = 0.0;
  double r_max = 0.0;
};

struct Road {
  std::string id;
  double length = 0.0;
  int cells = 0;
  std::vector<ClassParams> per_class;

  Greenshields diagram(int c) const { return {per_class[c].v_max, per_class[c].r_max}; }
  /// Jam density of the total density r = sum_c rho^c on this road.
  double total_jam_density() const {
    double R = 0.0;
    for (const auto& p : per_class) R = std::max(R, p.r_max);
    return R;
  }
};

enum class JunctionKind { Link, Merge, DivergeFifo, DivergeNonFifo, Origin, Destination };

inline const char* to_string(JunctionKind k) {
  switch (k) {
    case JunctionKind::Link: return "link";
    case JunctionKind::Merge: return "merge";
    case JunctionKind::DivergeFifo: return "diverge_fifo";
    case JunctionKind::DivergeNonFifo: return "diverge_nonfifo";
    case JunctionKind::Origin: return "origin";
    case JunctionKind::Destination: return "destination";
  }
  return "?";
}

inline bool is_diverge(JunctionKind k) {
  return k == JunctionKind::DivergeFifo || k == JunctionKind::DivergeNonFifo;
}

/// One piece of a piecewise-constant inflow: `value[c]` applies for t <= until.
struct InflowSegment {
  double until = 0.0;
  std::vector<double> value;
};

struct Junction {
  std::string id;
  /// Optional short name used to address the junction's controls ("alpha").
  std::string label;
  JunctionKind kind = JunctionKind::Link;
  std::vector<int> in;   // road indices
  std::vector<int> out;  // road indices

  /// Diverges: default split over `out`; merges: default priority over `in`.
  /// Indexed [class][branch].
  std::vector<std::vector<double>> weights;

  std::vector<InflowSegment> inflow;  // Origin only
  std::vector<double> outflow_cap;    // Destination only, per class

  /// Number of branches carrying a distribution/priority weight.
  int branch_count() const {
    if (kind == JunctionKind::Merge) return static_cast<int>(in.size());
    if (is_diverge(kind)) return static_cast<int>(out.size());
    return 0;
  }

  /// Inflow of class c at time t; zero past the last segment.
  double inflow_at(int c, double t) const {
    for (const auto& s : inflow)
      if (t <= s.until) return s.value[c];
    return 0.0;
  }
};

struct GridConfig {
  double dx = 0.0;
  double t_final = 0.0;
  double cfl_safety = 1.0;
};

struct Network {
  int classes = 0;
  std::vector<Road> roads;
  std::vector<Junction> junctions;
  GridConfig grid;

  int road_index(const std::string& id) const {
    for (std::size_t i = 0; i < roads.size(); ++i)
      if (roads[i].id == id) return static_cast<int>(i);
    return -1;
  }
  int junction_index(const std::string& id) const {
    for (std::size_t i = 0; i < junctions.size(); ++i)
      if (junctions[i].id == id) return static_cast<int>(i);
    return -1;
  }
};

/// Thrown by loaders and `require_valid` with the full violation list.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<std::string> errors)
      : std::runtime_error(join(errors)), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& e) {
    std::string s = "invalid network:";
    for (const auto& x : e) s += "\n  " + x;
    return s;
  }
  std::vector<std::string> errors_;
};

namespace detail {

inline bool is_stochastic(const std::vector<double>& w) {
  double s = 0.0;
  for (double x : w) {
    if (!(x >= 0.0)) return false;
    s += x;
  }
  return std::abs(s - 1.0) <= 1e-9;
}

}  // namespace detail

/// Checks every structural and parametric invariant of a network and returns
/// the complete list of violations (empty when valid).
inline std::vector<std::string> validate(const Network& net) {
  std::vector<std::string> err;
  const int N = net.classes;
  if (N <= 0) err.push_back("class count must be positive");
  if (net.roads.empty()) {
    err.push_back("no roads");
    return err;
  }

  const double dx = net.grid.dx;
  if (!(dx > 0.0)) err.push_back("grid dx must be positive");
  if (!(net.grid.t_final > 0.0)) err.push_back("grid t_final must be positive");
  if (!(net.grid.cfl_safety > 0.0 && net.grid.cfl_safety <= 1.0))
    err.push_back("grid cfl_safety must lie in (0,1]");

  std::map<std::string, int> seen;
  for (const auto& road : net.roads) {
    const std::string tag = "road '" + road.id + "': ";
    if (seen[road.id]++ == 1) err.push_back(tag + "duplicate id");
    if (!(road.length > 0.0)) err.push_back(tag + "nonpositive parameter length");
    if (road.cells < 2) err.push_back(tag + "needs at least 2 cells");
    if (static_cast<int>(road.per_class.size()) != N)
      err.push_back(tag + "class parameter count differs from class count");
    for (std::size_t c = 0; c < road.per_class.size(); ++c) {
      if (!(road.per_class[c].v_max > 0.0))
        err.push_back(tag + "nonpositive parameter v_max for class " + std::to_string(c + 1));
      if (!(road.per_class[c].r_max > 0.0))
        err.push_back(tag + "nonpositive parameter r_max for class " + std::to_string(c + 1));
    }
    if (dx > 0.0 && road.cells > 0 && road.length > 0.0 &&
        std::abs(road.length / road.cells - dx) > 1e-9 * dx)
      err.push_back(tag + "cell size differs from grid dx (uniform grid required)");
  }

  const int nroads = static_cast<int>(net.roads.size());
  std::vector<int> consumed(nroads, 0), fed(nroads, 0);
  bool has_origin = false, has_destination = false;
  for (const auto& j : net.junctions) {
    const std::string tag = "junction '" + j.id + "': ";
    const auto nin = j.in.size(), nout = j.out.size();
    bool arity_ok = true;
    switch (j.kind) {
      case JunctionKind::Link: arity_ok = nin == 1 && nout == 1; break;
      case JunctionKind::Merge: arity_ok = nin >= 2 && nout == 1; break;
      case JunctionKind::DivergeFifo:
      case JunctionKind::DivergeNonFifo: arity_ok = nin == 1 && nout >= 2; break;
      case JunctionKind::Origin: arity_ok = nin == 0 && nout == 1; has_origin = true; break;
      case JunctionKind::Destination:
        arity_ok = nin == 1 && nout == 0;
        has_destination = true;
        break;
    }
    if (!arity_ok) err.push_back(tag + "arity mismatch for kind " + to_string(j.kind));
    for (int r : j.in) {
      if (r < 0 || r >= nroads) {
        err.push_back(tag + "unknown incoming road");
        continue;
      }
      if (++consumed[r] == 2) err.push_back("road '" + net.roads[r].id + "': road multiply consumed");
    }
    for (int r : j.out) {
      if (r < 0 || r >= nroads) {
        err.push_back(tag + "unknown outgoing road");
        continue;
      }
      if (++fed[r] == 2) err.push_back("road '" + net.roads[r].id + "': road multiply fed");
    }
    const int nb = j.branch_count();
    if (nb > 0) {
      if (static_cast<int>(j.weights.size()) != N) {
        err.push_back(tag + "weights must be given per class");
      } else {
        for (int c = 0; c < N; ++c) {
          if (static_cast<int>(j.weights[c].size()) != nb || !detail::is_stochastic(j.weights[c]))
            err.push_back(tag + "weights of class " + std::to_string(c + 1) +
                          " are not a stochastic vector over its branches");
        }
      }
    }
    if (j.kind == JunctionKind::Origin) {
      if (j.inflow.empty()) err.push_back(tag + "origin without inflow segments");
      for (const auto& s : j.inflow) {
        if (static_cast<int>(s.value.size()) != N) {
          err.push_back(tag + "inflow segment must list one value per class");
          continue;
        }
        for (double v : s.value)
          if (!(v >= 0.0)) err.push_back(tag + "negative inflow");
      }
    }
    if (j.kind == JunctionKind::Destination) {
      if (static_cast<int>(j.outflow_cap.size()) != N)
        err.push_back(tag + "outflow cap must list one value per class");
      for (double v : j.outflow_cap)
        if (!(v >= 0.0)) err.push_back(tag + "negative outflow cap");
    }
  }
  for (int r = 0; r < nroads; ++r) {
    if (consumed[r] == 0 || fed[r] == 0)
      err.push_back("road '" + net.roads[r].id + "': dangling road");
  }
  if (!has_origin) err.push_back("network has no origin");
  if (!has_destination) err.push_back("network has no destination");
  if (!err.empty()) return err;

  // Reachability: every road must be reachable from an origin and reach a
  // destination.
  std::vector<int> down(nroads, -1), up(nroads, -1);
  for (std::size_t ji = 0; ji < net.junctions.size(); ++ji) {
    for (int r : net.junctions[ji].in) down[r] = static_cast<int>(ji);
    for (int r : net.junctions[ji].out) up[r] = static_cast<int>(ji);
  }
  auto sweep = [&](bool forward) {
    std::vector<char> mark(nroads, 0);
    std::queue<int> q;
    for (const auto& j : net.junctions) {
      const bool seed = forward ? j.kind == JunctionKind::Origin : j.kind == JunctionKind::Destination;
      if (!seed) continue;
      for (int r : forward ? j.out : j.in) {
        mark[r] = 1;
        q.push(r);
      }
    }
    while (!q.empty()) {
      const int r = q.front();
      q.pop();
      const auto& j = net.junctions[forward ? down[r] : up[r]];
      for (int s : forward ? j.out : j.in)
        if (!mark[s]) {
          mark[s] = 1;
          q.push(s);
        }
    }
    return mark;
  };
  const auto from_origin = sweep(true);
  const auto to_dest = sweep(false);
  for (int r = 0; r < nroads; ++r) {
    if (!from_origin[r]) err.push_back("road '" + net.roads[r].id + "': not reachable from an origin");
    if (!to_dest[r]) err.push_back("road '" + net.roads[r].id + "': unreachable destination");
  }
  return err;
}

inline void require_valid(const Network& net) {
  auto err = validate(net);
  if (!err.empty()) throw ValidationError(std::move(err));
}

/// Derived indexing of a validated network. The per-class state slice holds
/// one buffer per origin road followed by the cells of every road in order,
/// so M = |O| + sum_l N_l; the full state vector is N consecutive slices.
struct Topology {
  int classes = 0;
  int M = 0;
  std::vector<int> cell_offset;    // per road, into the class slice
  std::vector<int> buffer_index;   // per road, -1 when not an origin road
  std::vector<int> origin_roads;   // O, in buffer order
  std::vector<int> origin_junction;  // per origin road (same order)
  std::vector<int> upstream;       // junction index feeding each road
  std::vector<int> downstream;     // junction index consuming each road
  std::vector<int> iface_offset;   // per road, N_l + 1 interfaces each
  int ifaces = 0;                  // interfaces per class

  explicit Topology(const Network& net) : classes(net.classes) {
    const int nroads = static_cast<int>(net.roads.size());
    upstream.assign(nroads, -1);
    downstream.assign(nroads, -1);
    buffer_index.assign(nroads, -1);
    for (std::size_t ji = 0; ji < net.junctions.size(); ++ji) {
      const auto& j = net.junctions[ji];
      for (int r : j.in) downstream[r] = static_cast<int>(ji);
      for (int r : j.out) upstream[r] = static_cast<int>(ji);
      if (j.kind == JunctionKind::Origin) {
        buffer_index[j.out[0]] = static_cast<int>(origin_roads.size());
        origin_roads.push_back(j.out[0]);
        origin_junction.push_back(static_cast<int>(ji));
      }
    }
    int off = static_cast<int>(origin_roads.size());
    cell_offset.resize(nroads);
    iface_offset.resize(nroads);
    for (int r = 0; r < nroads; ++r) {
      cell_offset[r] = off;
      off += net.roads[r].cells;
      iface_offset[r] = ifaces;
      ifaces += net.roads[r].cells + 1;
    }
    M = off;
  }

  int size() const { return classes * M; }
  int cell(int c, int road, int j) const { return c * M + cell_offset[road] + j; }
  int buffer(int c, int origin) const { return c * M + origin; }
  int iface(int c, int road, int i) const { return c * ifaces + iface_offset[road] + i; }
};

/// Time discretization. T * dt == t_final by construction.
struct GridSpec {
  double dx = 0.0;
  double dt = 0.0;
  double t_final = 0.0;
  int steps = 0;
  double lambda = 0.0;

  double time(int nu) const { return t_final * nu / steps; }
};

/// Largest max{|v_c|, |Q_c'|} over all roads and classes.
inline double max_wave_speed(const Network& net) {
  double s = 0.0;
  for (const auto& road : net.roads)
    for (int c = 0; c < net.classes; ++c) s = std::max(s, road.diagram(c).max_wave_speed());
  return s;
}

/// CFL-limited time step, shrunk so that t_final is an integer number of steps.
inline GridSpec cfl_grid(const Network& net, double dx, double safety, double t_final) {
  const double dt_cfl = safety * dx / max_wave_speed(net);
  // The relative slack absorbs quotients like 1 / (0.1/80) = 800.0000000000001.
  const double ratio = t_final / dt_cfl;
  int steps = static_cast<int>(std::ceil(ratio * (1.0 - 1e-12)));
  steps = std::max(steps, 1);
  GridSpec g;
  g.dx = dx;
  g.t_final = t_final;
  g.steps = steps;
  g.dt = t_final / steps;
  g.lambda = g.dt / dx;
  return g;
}

inline double cfl_dt(const Network& net, double dx, double safety) {
  return cfl_grid(net, dx, safety, net.grid.t_final).dt;
}

inline GridSpec cfl_grid(const Network& net) {
  return cfl_grid(net, net.grid.dx, net.grid.cfl_safety, net.grid.t_final);
}

}  // namespace mcflow
