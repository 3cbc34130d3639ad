#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcflow/controls.hpp"
#include "mcflow/network.hpp"

namespace mcflow {

/// Malformed or missing scenario / controls input.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

using json = nlohmann::json;

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError("'" + path + "': " + e.what());
  }
}

inline JunctionKind parse_kind(const std::string& s) {
  static const std::map<std::string, JunctionKind> kinds = {
      {"link", JunctionKind::Link},
      {"merge", JunctionKind::Merge},
      {"diverge_fifo", JunctionKind::DivergeFifo},
      {"fifo", JunctionKind::DivergeFifo},
      {"diverge_nonfifo", JunctionKind::DivergeNonFifo},
      {"nonfifo", JunctionKind::DivergeNonFifo},
      {"origin", JunctionKind::Origin},
      {"destination", JunctionKind::Destination},
  };
  auto it = kinds.find(s);
  if (it == kinds.end()) throw InputError("unknown junction kind '" + s + "'");
  return it->second;
}

inline int road_ref(const Network& net, const json& v) {
  const auto id = v.is_string() ? v.get<std::string>() : std::to_string(v.get<long long>());
  const int r = net.road_index(id);
  if (r < 0) throw InputError("unknown road '" + id + "'");
  return r;
}

inline std::string as_id(const json& v) { return v.is_string() ? v.get<std::string>() : std::to_string(v.get<long long>()); }

/// Per-class weight vectors. Accepts [[w_b...] per class], or one scalar per
/// class for two-branch junctions (weight of the first branch).
inline std::vector<std::vector<double>> parse_weights(const json& v, int classes, int branches) {
  if (!v.is_array() || static_cast<int>(v.size()) != classes)
    throw InputError("weights need one entry per class");
  std::vector<std::vector<double>> w;
  for (const auto& e : v) {
    if (e.is_number()) {
      if (branches != 2) throw InputError("scalar weights need exactly two branches");
      const double x = e.get<double>();
      w.push_back({x, 1.0 - x});
    } else {
      w.push_back(e.get<std::vector<double>>());
    }
  }
  return w;
}

}  // namespace io

/// Builds a Network from the scenario JSON object. The result is not yet
/// validated.
inline Network network_from_json(const io::json& j) {
  Network net;
  try {
    net.classes = j.at("classes").get<int>();
    for (const auto& r : j.at("roads")) {
      Road road;
      road.id = io::as_id(r.at("id"));
      road.length = r.at("length").get<double>();
      road.cells = r.at("cells").get<int>();
      for (const auto& p : r.at("per_class")) road.per_class.push_back({p.at("v_max").get<double>(), p.at("r_max").get<double>()});
      net.roads.push_back(std::move(road));
    }
    for (const auto& e : j.at("junctions")) {
      Junction junc;
      junc.id = io::as_id(e.at("id"));
      junc.label = e.value("label", std::string{});
      junc.kind = io::parse_kind(e.at("kind").get<std::string>());
      for (const auto& r : e.value("in", io::json::array())) junc.in.push_back(io::road_ref(net, r));
      for (const auto& r : e.value("out", io::json::array())) junc.out.push_back(io::road_ref(net, r));
      const int nb = junc.branch_count();
      const char* key = junc.kind == JunctionKind::Merge ? "priorities" : "splits";
      if (nb > 0) {
        if (e.contains(key)) {
          junc.weights = io::parse_weights(e.at(key), net.classes, nb);
        } else {
          junc.weights.assign(net.classes, std::vector<double>(nb, 1.0 / nb));
        }
      }
      if (e.contains("inflow")) {
        for (const auto& s : e.at("inflow")) {
          InflowSegment seg;
          seg.until = s.contains("until_time") ? s.at("until_time").get<double>() : s.at("until").get<double>();
          seg.value = s.at("value").get<std::vector<double>>();
          junc.inflow.push_back(std::move(seg));
        }
      }
      if (e.contains("outflow_cap")) junc.outflow_cap = e.at("outflow_cap").get<std::vector<double>>();
      net.junctions.push_back(std::move(junc));
    }
    const auto& g = j.at("grid");
    net.grid.dx = g.at("dx").get<double>();
    net.grid.t_final = g.at("t_final").get<double>();
    net.grid.cfl_safety = g.value("cfl_safety", 1.0);
  } catch (const io::json::exception& ex) {
    throw InputError(std::string("scenario: ") + ex.what());
  }
  return net;
}

inline Network load_network(const std::string& path) { return network_from_json(io::read_json(path)); }

/// Controls parsed from a controls file: the schedule plus the set of free
/// scalars (every entry present in the file).
struct LoadedControls {
  ControlSchedule schedule;
  ControlLayout layout;
};

namespace io {
/// Values per subinterval, replicated to n pieces when the file gives fewer.
inline std::vector<json> per_piece(const json& v, int n) {
  if (!v.is_array()) return std::vector<json>(n, v);
  const int k = static_cast<int>(v.size());
  if (k == 0 || n % k != 0) throw InputError("controls: subinterval values do not divide n");
  std::vector<json> out;
  for (int p = 0; p < n; ++p) out.push_back(v[p / (n / k)]);
  return out;
}
inline int class_key(const std::string& s, int classes) {
  int c = 0;
  try {
    c = std::stoi(s);
  } catch (const std::exception&) {
    throw InputError("controls: bad class key '" + s + "'");
  }
  if (c < 1 || c > classes) throw InputError("controls: class " + s + " out of range");
  return c - 1;
}
}  // namespace io

/// Parses a controls object for `net`. When `n_override` > 0 the schedule uses
/// that many subintervals (file values are replicated).
inline LoadedControls controls_from_json(const Network& net, const io::json& j, int n_override = 0) {
  const int n_file = j.value("n", 1);
  const int n = n_override > 0 ? n_override : n_file;
  LoadedControls lc{ControlSchedule::defaults(net, n), ControlLayout(net, n)};
  auto weights = [&](const char* key, bool merge) {
    if (!j.contains(key)) return;
    for (const auto& [jid, per_class] : j.at(key).items()) {
      const int ji = net.junction_index(jid);
      if (ji < 0) throw InputError(std::string("controls: unknown junction '") + jid + "'");
      const auto& junc = net.junctions[ji];
      if ((junc.kind == JunctionKind::Merge) != merge || junc.branch_count() < 2)
        throw InputError(std::string("controls: junction '") + jid + "' does not take " + key);
      const int nb = junc.branch_count();
      for (const auto& [ckey, vals] : per_class.items()) {
        const int c = io::class_key(ckey, net.classes);
        const auto pieces = io::per_piece(vals, n);
        for (int p = 0; p < n; ++p) {
          auto& w = lc.schedule.pieces[p].weights[ji][c];
          if (pieces[p].is_number()) {
            if (nb != 2) throw InputError("controls: scalar weight on a junction with more than two branches");
            w = {pieces[p].get<double>(), 1.0 - pieces[p].get<double>()};
          } else {
            w = pieces[p].get<std::vector<double>>();
            if (static_cast<int>(w.size()) != nb) throw InputError("controls: weight vector length mismatch");
          }
          if (!detail::is_stochastic(w)) throw InputError(std::string("controls: non-stochastic weights at '") + jid + "'");
        }
        lc.layout.free_weight(ji, c);
      }
    }
  };
  try {
    weights("splits", false);
    weights("priorities", true);
    if (j.contains("speed_limits")) {
      for (const auto& [rid, per_class] : j.at("speed_limits").items()) {
        const int r = net.road_index(rid);
        if (r < 0) throw InputError("controls: unknown road '" + rid + "'");
        for (const auto& [ckey, vals] : per_class.items()) {
          const int c = io::class_key(ckey, net.classes);
          const auto pieces = io::per_piece(vals, n);
          for (int p = 0; p < n; ++p) {
            const double v = pieces[p].get<double>();
            if (v < 0.0 || v > net.roads[r].per_class[c].v_max)
              throw InputError("controls: speed limit outside [0, v_max] on road '" + rid + "'");
            lc.schedule.pieces[p].speed[r][c] = v;
          }
          lc.layout.free_speed(r, c);
        }
      }
    }
  } catch (const io::json::exception& ex) {
    throw InputError(std::string("controls: ") + ex.what());
  }
  return lc;
}

inline LoadedControls load_controls(const Network& net, const std::string& path, int n_override = 0) {
  return controls_from_json(net, io::read_json(path), n_override);
}

/// Controls file for the free slots of `layout` (the inverse of
/// controls_from_json for those entries).
inline io::json controls_to_json(const Network& net, const ControlSchedule& cs, const ControlLayout& layout) {
  io::json j;
  j["n"] = cs.n;
  for (const auto& s : layout.slots()) {
    if (s.piece != 0 || s.branch > 0) continue;
    io::json vals = io::json::array();
    for (int p = 0; p < cs.n; ++p) {
      const auto& snap = cs.pieces[p];
      if (s.kind == SlotKind::Speed) vals.push_back(snap.speed[s.owner][s.cls]);
      else if (s.branch < 0) vals.push_back(snap.weights[s.owner][s.cls][0]);
      else vals.push_back(snap.weights[s.owner][s.cls]);
    }
    const auto cls = std::to_string(s.cls + 1);
    if (s.kind == SlotKind::Speed) {
      j["speed_limits"][net.roads[s.owner].id][cls] = vals;
    } else {
      const auto& junc = net.junctions[s.owner];
      j[junc.kind == JunctionKind::Merge ? "priorities" : "splits"][junc.id][cls] = vals;
    }
  }
  return j;
}

/// A control named on the command line: "alpha1" (junction label + class),
/// "e2:1" (junction id : class) or "speed:<road>:<class>". Classes are 1-based.
struct ControlToken {
  SlotKind kind = SlotKind::Weight;
  int owner = 0;
  int cls = 0;
};

inline ControlToken parse_control_token(const Network& net, const std::string& tok) {
  auto cls_of = [&](const std::string& s) {
    int c = 0;
    try {
      std::size_t pos = 0;
      c = std::stoi(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw InputError("bad class in control '" + tok + "'");
    }
    if (c < 1 || c > net.classes) throw InputError("class out of range in control '" + tok + "'");
    return c - 1;
  };
  if (tok.rfind("speed:", 0) == 0) {
    const auto rest = tok.substr(6);
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos) throw InputError("expected speed:<road>:<class>, got '" + tok + "'");
    const int r = net.road_index(rest.substr(0, colon));
    if (r < 0) throw InputError("unknown road in control '" + tok + "'");
    return {SlotKind::Speed, r, cls_of(rest.substr(colon + 1))};
  }
  if (const auto colon = tok.rfind(':'); colon != std::string::npos) {
    const int ji = net.junction_index(tok.substr(0, colon));
    if (ji < 0) throw InputError("unknown junction in control '" + tok + "'");
    return {SlotKind::Weight, ji, cls_of(tok.substr(colon + 1))};
  }
  // label followed by the class digits
  std::size_t k = tok.size();
  while (k > 0 && std::isdigit(static_cast<unsigned char>(tok[k - 1]))) --k;
  if (k == 0 || k == tok.size()) throw InputError("cannot parse control '" + tok + "'");
  const auto label = tok.substr(0, k);
  for (std::size_t ji = 0; ji < net.junctions.size(); ++ji)
    if (net.junctions[ji].label == label || net.junctions[ji].id == label)
      return {SlotKind::Weight, static_cast<int>(ji), cls_of(tok.substr(k))};
  throw InputError("unknown junction label in control '" + tok + "'");
}

inline void free_control(ControlLayout& layout, const ControlToken& t) {
  if (t.kind == SlotKind::Speed) layout.free_speed(t.owner, t.cls);
  else layout.free_weight(t.owner, t.cls);
}

}  // namespace mcflow
