#pragma once

#include <algorithm>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcflow/network.hpp"

namespace mcflow {

/// Control values in force during one time subinterval.
struct ControlSnapshot {
  /// [junction][class][branch]: diverge splits over outgoing roads, merge
  /// priorities over incoming roads, empty for other junction kinds.
  std::vector<std::vector<std::vector<double>>> weights;
  /// [road][class] free-flow speed used by the road's diagram.
  std::vector<std::vector<double>> speed;
};

/// Piecewise-constant-in-time controls over n equal subintervals of [0, T_f).
struct ControlSchedule {
  int n = 1;
  std::vector<ControlSnapshot> pieces;

  /// Scenario defaults (junction weights, road v_max) replicated n times.
  static ControlSchedule defaults(const Network& net, int n = 1) {
    if (n < 1) throw std::invalid_argument("subinterval count must be >= 1");
    ControlSnapshot s;
    for (const auto& j : net.junctions) s.weights.push_back(j.weights);
    for (const auto& road : net.roads) {
      std::vector<double> v;
      for (const auto& p : road.per_class) v.push_back(p.v_max);
      s.speed.push_back(std::move(v));
    }
    ControlSchedule cs;
    cs.n = n;
    cs.pieces.assign(n, s);
    return cs;
  }

  /// Subinterval active for the fluxes evaluated at time level nu.
  int piece_of_step(int nu, int steps) const {
    const long long p = static_cast<long long>(nu) * n / steps;
    return static_cast<int>(std::min<long long>(p, n - 1));
  }
  const ControlSnapshot& at_step(int nu, int steps) const { return pieces[piece_of_step(nu, steps)]; }

  /// Diagram of road `road`, class c in subinterval `piece` (speed limit applied).
  Greenshields diagram(const Network& net, int piece, int road, int c) const {
    return {pieces[piece].speed[road][c], net.roads[road].per_class[c].r_max};
  }
};

enum class SlotKind { Weight, Speed };

/// One free scalar of the optimization vector u.
///
/// For a two-branch junction the slot is the weight x of branch 0 and branch
/// 1 receives 1 - x (`branch == -1`). Junctions with more branches expose one
/// slot per branch; those slots share a `group` and are kept on the simplex.
struct ControlSlot {
  SlotKind kind = SlotKind::Weight;
  int owner = 0;  // junction index (Weight) or road index (Speed)
  int cls = 0;
  int branch = -1;
  int piece = 0;
  double lo = 0.0;
  double hi = 1.0;
  int group = -1;
};

/// Ordered set of free control scalars and the chain-rule map from raw
/// control parameters (individual weights, speeds) onto them. The network
/// passed to `reset` must outlive calls to `free_weight` / `free_speed`.
class ControlLayout {
 public:
  ControlLayout() = default;
  ControlLayout(const Network& net, int n) { reset(net, n); }

  void reset(const Network& net, int n) {
    n_ = n;
    classes_ = net.classes;
    njunctions_ = static_cast<int>(net.junctions.size());
    nroads_ = static_cast<int>(net.roads.size());
    max_branch_ = 0;
    for (const auto& j : net.junctions) max_branch_ = std::max(max_branch_, j.branch_count());
    weight_slot_.assign(static_cast<std::size_t>(njunctions_) * classes_ * std::max(max_branch_, 1) * n, {-1, 0.0});
    speed_slot_.assign(static_cast<std::size_t>(nroads_) * classes_ * n, -1);
    slots_.clear();
    names_.clear();
    groups_ = 0;
    net_ = &net;
  }

  int subintervals() const { return n_; }
  int size() const { return static_cast<int>(slots_.size()); }
  bool empty() const { return slots_.empty(); }
  const std::vector<ControlSlot>& slots() const { return slots_; }
  const ControlSlot& operator[](int i) const { return slots_[i]; }

  /// Frees the weights of junction j for class c in every subinterval.
  void free_weight(int j, int c) {
    const auto& junc = net_->junctions.at(j);
    const int nb = junc.branch_count();
    if (nb < 2) throw std::invalid_argument("junction '" + junc.id + "' has no weights to free");
    for (int p = 0; p < n_; ++p) {
      if (weight_slot_[widx(j, c, 0, p)].first >= 0) continue;
      if (nb == 2) {
        const int s = push({SlotKind::Weight, j, c, -1, p, 0.0, 1.0, -1});
        weight_slot_[widx(j, c, 0, p)] = {s, 1.0};
        weight_slot_[widx(j, c, 1, p)] = {s, -1.0};
      } else {
        const int g = groups_++;
        for (int b = 0; b < nb; ++b) {
          const int s = push({SlotKind::Weight, j, c, b, p, 0.0, 1.0, g});
          weight_slot_[widx(j, c, b, p)] = {s, 1.0};
        }
      }
    }
  }

  /// Frees the speed limit of road r, class c, bounded by [0, v_max].
  void free_speed(int r, int c) {
    const double vmax = net_->roads.at(r).per_class.at(c).v_max;
    for (int p = 0; p < n_; ++p) {
      if (speed_slot_[sidx(r, c, p)] >= 0) continue;
      speed_slot_[sidx(r, c, p)] = push({SlotKind::Speed, r, c, -1, p, 0.0, vmax, -1});
    }
  }

  /// Slot and chain factor for raw weight (junction, class, branch, piece).
  std::pair<int, double> weight_slot(int j, int c, int b, int p) const { return weight_slot_[widx(j, c, b, p)]; }
  int speed_slot(int r, int c, int p) const { return speed_slot_[sidx(r, c, p)]; }

  std::vector<double> extract(const ControlSchedule& cs) const {
    std::vector<double> u(slots_.size());
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      const auto& s = slots_[i];
      const auto& snap = cs.pieces.at(s.piece);
      if (s.kind == SlotKind::Speed) u[i] = snap.speed[s.owner][s.cls];
      else u[i] = snap.weights[s.owner][s.cls][std::max(s.branch, 0)];
    }
    return u;
  }

  void apply(ControlSchedule& cs, std::span<const double> u) const {
    if (u.size() != slots_.size()) throw std::invalid_argument("control vector length mismatch");
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      const auto& s = slots_[i];
      auto& snap = cs.pieces.at(s.piece);
      if (s.kind == SlotKind::Speed) {
        snap.speed[s.owner][s.cls] = u[i];
      } else if (s.branch < 0) {
        snap.weights[s.owner][s.cls][0] = u[i];
        snap.weights[s.owner][s.cls][1] = 1.0 - u[i];
      } else {
        snap.weights[s.owner][s.cls][s.branch] = u[i];
      }
    }
  }

  /// Human-readable control name: junction label (or id), `[road]` for
  /// multi-branch weights, `speed:<road>` for speed limits.
  const std::string& name(int i) const { return names_[i]; }

 private:
  int push(ControlSlot s) {
    std::string nm;
    if (s.kind == SlotKind::Speed) {
      nm = "speed:" + net_->roads[s.owner].id;
    } else {
      const auto& j = net_->junctions[s.owner];
      nm = j.label.empty() ? j.id : j.label;
      if (s.branch >= 0)
        nm += "[" + net_->roads[j.kind == JunctionKind::Merge ? j.in[s.branch] : j.out[s.branch]].id + "]";
    }
    names_.push_back(std::move(nm));
    slots_.push_back(s);
    return static_cast<int>(slots_.size()) - 1;
  }
  std::size_t widx(int j, int c, int b, int p) const {
    return ((static_cast<std::size_t>(j) * classes_ + c) * std::max(max_branch_, 1) + b) * n_ + p;
  }
  std::size_t sidx(int r, int c, int p) const { return (static_cast<std::size_t>(r) * classes_ + c) * n_ + p; }

  const Network* net_ = nullptr;
  int n_ = 1;
  int classes_ = 0;
  int njunctions_ = 0;
  int nroads_ = 0;
  int max_branch_ = 0;
  int groups_ = 0;
  std::vector<ControlSlot> slots_;
  std::vector<std::string> names_;
  std::vector<std::pair<int, double>> weight_slot_;
  std::vector<int> speed_slot_;
};

/// Subinterval count n replicated from a schedule defined with fewer pieces.
inline ControlSchedule refine(const ControlSchedule& cs, int n) {
  if (n % cs.n != 0) throw std::invalid_argument("subinterval count must be a multiple of the schedule's");
  ControlSchedule out;
  out.n = n;
  for (int p = 0; p < n; ++p) out.pieces.push_back(cs.pieces[p / (n / cs.n)]);
  return out;
}

}  // namespace mcflow
