// mcflow command-line driver: simulate, gradient, optimize, grid, pareto.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcflow/adjoint.hpp"
#include "mcflow/cost.hpp"
#include "mcflow/fd.hpp"
#include "mcflow/godunov.hpp"
#include "mcflow/optimize.hpp"
#include "mcflow/scenario_io.hpp"

namespace fs = std::filesystem;
using namespace mcflow;

namespace {

constexpr const char* kVersion = "mcflow 0.1.0";

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

struct Common {
  std::string scenario;
  std::string controls;
  std::string out;
  int n = 0;
  int threads = 1;
  std::string buffer = "capped";
};

struct Loaded {
  Model model;
  LoadedControls lc;
};

BufferDemand parse_buffer(const std::string& s) {
  if (s == "capped") return BufferDemand::Capped;
  if (s == "saturated") return BufferDemand::Saturated;
  throw InputError("unknown buffer mode '" + s + "' (expected capped or saturated)");
}

// The layout points into model.net, so it is built after the model is in place.
std::unique_ptr<Loaded> load(const Common& c) {
  auto net = load_network(c.scenario);
  auto L = std::unique_ptr<Loaded>(new Loaded{Model(std::move(net), parse_buffer(c.buffer)), {}});
  const auto& mnet = L->model.net;
  if (!c.controls.empty()) {
    L->lc = load_controls(mnet, c.controls, c.n);
  } else {
    const int n = c.n > 0 ? c.n : 1;
    L->lc = {ControlSchedule::defaults(mnet, n), ControlLayout(mnet, n)};
  }
  return L;
}

/// Frees the controls named by `tokens`; with none given and an empty layout
/// every diverge split becomes free.
void choose_free(Loaded& L, const std::vector<std::string>& tokens) {
  const auto& net = L.model.net;
  if (!tokens.empty()) {
    L.lc.layout = ControlLayout(net, L.lc.schedule.n);
    for (const auto& t : tokens) free_control(L.lc.layout, parse_control_token(net, t));
    return;
  }
  if (!L.lc.layout.empty()) return;
  for (std::size_t j = 0; j < net.junctions.size(); ++j)
    if (is_diverge(net.junctions[j].kind) && net.junctions[j].branch_count() >= 2)
      for (int c = 0; c < net.classes; ++c) L.lc.layout.free_weight(static_cast<int>(j), c);
}

std::vector<bool> class_mask(const Network& net, const std::vector<int>& classes) {
  if (classes.empty()) return {};
  std::vector<bool> mask(net.classes, false);
  for (int c : classes) {
    if (c < 1 || c > net.classes) throw InputError("class " + std::to_string(c) + " out of range");
    mask[c - 1] = true;
  }
  return mask;
}

Objective make_objective(const Loaded& L, const std::string& kind, double weight, const std::vector<int>& classes) {
  Objective o;
  if (kind == "weighted") {
    if (weight < 0.0 || weight > 1.0) throw InputError("--weight must lie in [0, 1]");
    const auto tr = simulate(L.model, L.lc.schedule);
    const double t0 = ttt(L.model, tr), d0 = ttd(L.model, tr, L.lc.schedule);
    if (!(t0 > 0.0) || !(d0 > 0.0)) throw std::runtime_error("weighted objective needs positive TTT and TTD at the start");
    o = {weight / t0, (1.0 - weight) / d0, {}};
  } else if (kind == "ttt" || kind == "ttd") {
    o = parse_objective(kind);
  } else {
    throw InputError("unknown objective '" + kind + "' (expected ttt, ttd or weighted)");
  }
  o.mask = class_mask(L.model.net, classes);
  return o;
}

std::ofstream open_out(const std::string& dir, const std::string& name) {
  fs::create_directories(dir);
  std::ofstream f(fs::path(dir) / name);
  if (!f) throw std::runtime_error("cannot write '" + (fs::path(dir) / name).string() + "'");
  return f;
}

void write_controls(const Loaded& L, const ControlSchedule& cs, const std::string& dir) {
  auto f = open_out(dir, "controls.json");
  f << controls_to_json(L.model.net, cs, L.lc.layout).dump(2) << "\n";
}

std::string describe(const Loaded& L, std::span<const double> u) {
  std::ostringstream s;
  const auto& lay = L.lc.layout;
  for (int i = 0; i < lay.size(); ++i) {
    if (i) s << " ";
    s << lay.name(i) << lay[i].cls + 1 << "[" << lay[i].piece + 1 << "]=" << num(u[i]);
  }
  return s.str();
}

// ---- subcommands ----

int run_simulate(const Common& c, bool no_check) {
  auto L = load(c);
  const auto& m = L->model;
  const auto& cs = L->lc.schedule;
  SimulateOptions opt;
  opt.check_invariants = !no_check;
  const auto tr = simulate(m, cs, {}, opt);
  if (!c.out.empty()) {
    for (int cl = 0; cl < m.classes(); ++cl) {
      auto f = open_out(c.out, "density_class" + std::to_string(cl + 1) + ".csv");
      f << "step,time,road,cell,density\n";
      for (int nu = 0; nu <= tr.steps; ++nu) {
        const auto y = tr.state(nu);
        for (std::size_t r = 0; r < m.net.roads.size(); ++r)
          for (int j = 0; j < m.net.roads[r].cells; ++j)
            f << nu << "," << num(m.grid.time(nu)) << "," << m.net.roads[r].id << "," << j << ","
              << num(y[m.topo.cell(cl, static_cast<int>(r), j)]) << "\n";
      }
    }
    auto f = open_out(c.out, "buffers.csv");
    f << "step,time,junction,class,length\n";
    for (int nu = 0; nu <= tr.steps; ++nu) {
      const auto y = tr.state(nu);
      for (int o = 0; o < m.origin_count(); ++o)
        for (int cl = 0; cl < m.classes(); ++cl)
          f << nu << "," << num(m.grid.time(nu)) << "," << m.net.junctions[m.topo.origin_junction[o]].id << ","
            << cl + 1 << "," << num(y[m.topo.buffer(cl, o)]) << "\n";
    }
  }
  std::cout << "TTT=" << num(ttt(m, tr)) << " TTD=" << num(ttd(m, tr, cs)) << " steps=" << tr.steps
            << " dt=" << num(m.grid.dt) << " near_ties=" << tr.near_ties << "\n";
  return 0;
}

struct GradientArgs {
  std::string objective = "ttt";
  double weight = 0.5;
  std::vector<int> classes;
  std::string method = "adjoint";
  bool check_fd = false;
  double h = 1e-6;
  std::vector<std::string> free;
};

int run_gradient(const Common& c, const GradientArgs& a) {
  auto L = load(c);
  choose_free(*L, a.free);
  const auto& m = L->model;
  const auto obj = make_objective(*L, a.objective, a.weight, a.classes);
  const auto method = parse_method(a.method);
  const auto& lay = L->lc.layout;
  FdOptions fo;
  fo.h = a.h;
  fo.threads = c.threads;
  std::vector<double> g;
  double value = 0.0;
  int ties = 0;
  if (method == GradientMethod::Adjoint) {
    auto rep = gradient(m, obj, L->lc.schedule, lay);
    g = rep.gradient;
    value = rep.value;
    ties = rep.near_ties;
  } else {
    g = fd_gradient(m, obj, L->lc.schedule, lay, fo).gradient;
    value = evaluate(m, obj, simulate(m, L->lc.schedule), L->lc.schedule);
  }
  FdResult fd;
  std::vector<double> gcmp = g;
  if (a.check_fd) {
    fd = fd_gradient(m, obj, L->lc.schedule, lay, fo);
    gcmp = tangent_project(lay, g);
  }
  std::ostringstream csv;
  csv << "control,class,subinterval,value";
  if (a.check_fd) csv << ",fd,rel_err,kink,one_sided";
  csv << "\n";
  int bad = 0;
  for (int i = 0; i < lay.size(); ++i) {
    csv << lay.name(i) << "," << lay[i].cls + 1 << "," << lay[i].piece + 1 << "," << num(g[i]);
    if (a.check_fd) {
      const double err = relative_error(gcmp[i], fd.gradient[i], 1e-8);
      if (err > 1e-3 && !fd.kink[i]) ++bad;
      csv << "," << num(fd.gradient[i]) << "," << num(err) << "," << (fd.kink[i] ? 1 : 0) << ","
          << (fd.one_sided[i] ? 1 : 0);
    }
    csv << "\n";
  }
  if (c.out.empty()) {
    std::cout << csv.str();
  } else {
    open_out(c.out, "gradient.csv") << csv.str();
  }
  std::cerr << "J=" << num(value) << " controls=" << lay.size() << " near_ties=" << ties;
  if (a.check_fd) std::cerr << " fd_mismatches=" << bad;
  std::cerr << "\n";
  return 0;
}

struct OptimizeArgs {
  GradientArgs g;
  int restarts = 5;
  std::uint64_t seed = 1;
  int max_iter = 1000;
};

OptimizerConfig config_of(const OptimizeArgs& a) {
  OptimizerConfig cfg;
  cfg.method = parse_method(a.g.method);
  cfg.max_iterations = a.max_iter;
  cfg.fd_step = a.g.h;
  return cfg;
}

int run_optimize(const Common& c, const OptimizeArgs& a) {
  auto L = load(c);
  choose_free(*L, a.g.free);
  const auto obj = make_objective(*L, a.g.objective, a.g.weight, a.g.classes);
  NetworkProblem np(L->model, obj, L->lc.schedule, L->lc.layout, parse_method(a.g.method), a.g.h);
  const auto ms = multistart(np.problem(), np.start(), config_of(a), a.restarts, a.seed, c.threads);
  const auto& best = ms.best;
  if (!c.out.empty()) {
    auto f = open_out(c.out, "iterations.csv");
    f << "start,iteration,value,pg_norm,step,evaluations\n";
    for (std::size_t k = 0; k < ms.runs.size(); ++k)
      for (const auto& r : ms.runs[k].log)
        f << k << "," << r.iteration << "," << num(r.value) << "," << num(r.pg_norm) << "," << num(r.step) << ","
          << r.evaluations << "\n";
    write_controls(*L, np.schedule(best.u), c.out);
  }
  const auto cs = np.schedule(best.u);
  const auto tr = simulate(L->model, cs);
  std::cout << "J=" << num(best.value) << " TTT=" << num(ttt(L->model, tr)) << " TTD=" << num(ttd(L->model, tr, cs))
            << " status=" << to_string(best.status) << " start=" << ms.best_start
            << " iterations=" << best.log.size() << " evaluations=" << best.evaluations << "\n";
  std::cout << describe(*L, best.u) << "\n";
  return 0;
}

int run_grid(const Common& c, const GradientArgs& a, int resolution) {
  if (a.free.empty()) throw InputError("grid needs --free");
  auto L = load(c);
  choose_free(*L, a.free);
  const auto obj = make_objective(*L, a.objective, a.weight, a.classes);
  const auto gr = grid_search(L->model, obj, L->lc.schedule, L->lc.layout, resolution, c.threads);
  if (!c.out.empty()) {
    auto f = open_out(c.out, "grid.csv");
    const auto& lay = L->lc.layout;
    for (int k = 0; k < lay.size(); ++k) f << lay.name(k) << lay[k].cls + 1 << "_" << lay[k].piece + 1 << ",";
    f << "value\n";
    for (std::size_t i = 0; i < gr.values.size(); ++i) {
      for (int k : gr.indices(i)) f << num(gr.coordinate(k)) << ",";
      f << num(gr.values[i]) << "\n";
    }
  }
  std::cout << "min=" << num(gr.min_value) << " at " << describe(*L, gr.argmin) << "\n";
  return 0;
}

int run_pareto(const Common& c, const OptimizeArgs& a, int W) {
  auto L = load(c);
  choose_free(*L, a.g.free);
  const auto pr = pareto_sweep(L->model, L->lc.schedule, L->lc.layout, W, config_of(a), a.restarts, a.seed, c.threads);
  for (const auto& w : pr.warnings) std::cerr << "warning: " << w << "\n";
  std::ostringstream csv;
  csv << "weight,ttt,ttd,dominated,status";
  const auto& lay = L->lc.layout;
  for (int k = 0; k < lay.size(); ++k) csv << "," << lay.name(k) << lay[k].cls + 1 << "_" << lay[k].piece + 1;
  csv << "\n";
  for (const auto& p : pr.all) {
    csv << num(p.weight) << "," << num(p.ttt) << "," << num(p.ttd) << "," << (p.dominated ? 1 : 0) << ","
        << to_string(p.status);
    for (double x : p.controls) csv << "," << num(x);
    csv << "\n";
  }
  if (!c.out.empty()) open_out(c.out, "pareto.csv") << csv.str();
  std::cout << "start TTT=" << num(pr.ttt0) << " TTD=" << num(pr.ttd0) << "\n";
  for (const auto& p : pr.front)
    std::cout << "w=" << num(p.weight) << " TTT=" << num(p.ttt) << " TTD=" << num(p.ttd) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-class traffic network simulation, adjoint gradients and control optimization"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Common common;
  GradientArgs ga;
  OptimizeArgs oa;
  bool no_check = false;
  int resolution = 30;
  int weights = 11;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("scenario", common.scenario, "Scenario JSON file")->required();
    sub->add_option("--controls", common.controls, "Controls JSON file");
    sub->add_option("--out", common.out, "Output directory for CSV files");
    sub->add_option("--n", common.n, "Control subintervals")->check(CLI::PositiveNumber);
    sub->add_option("--threads", common.threads, "Worker threads (0 = hardware)")->check(CLI::NonNegativeNumber);
    sub->add_option("--buffer", common.buffer, "Origin buffer demand: capped or saturated");
  };
  auto add_objective = [&](CLI::App* sub, GradientArgs& g) {
    sub->add_option("--objective", g.objective, "ttt, ttd or weighted");
    sub->add_option("--weight", g.weight, "TTT weight for --objective weighted");
    sub->add_option("--classes", g.classes, "Classes counted in the objective (1-based)")->delimiter(',');
    sub->add_option("--free", g.free, "Free controls, e.g. alpha1,beta2 or speed:3:1")->delimiter(',');
    sub->add_option("--method", g.method, "Gradient method: adjoint or fd");
    sub->add_option("--fd-step", g.h, "Finite-difference step");
  };

  auto* sim = app.add_subcommand("simulate", "Run the forward scheme");
  add_common(sim);
  sim->add_flag("--no-check", no_check, "Skip per-step invariant checks");

  auto* grad = app.add_subcommand("gradient", "Objective gradient w.r.t. the free controls");
  add_common(grad);
  add_objective(grad, ga);
  grad->add_flag("--check-fd", ga.check_fd, "Compare against central finite differences");

  auto* opt = app.add_subcommand("optimize", "Projected-gradient minimization with restarts");
  add_common(opt);
  add_objective(opt, oa.g);
  opt->add_option("--restarts", oa.restarts, "Number of starts")->check(CLI::PositiveNumber);
  opt->add_option("--seed", oa.seed, "Seed for random restarts");
  opt->add_option("--max-iter", oa.max_iter, "Iteration budget")->check(CLI::PositiveNumber);

  auto* grid = app.add_subcommand("grid", "Exhaustive lattice search over free controls");
  add_common(grid);
  add_objective(grid, ga);
  grid->add_option("--resolution", resolution, "Points per axis")->check(CLI::Range(2, 1000));

  auto* par = app.add_subcommand("pareto", "Weighted-sum TTT/TTD sweep");
  add_common(par);
  add_objective(par, oa.g);
  par->add_option("--weights", weights, "Number of weights W")->check(CLI::Range(2, 1000));
  oa.restarts = 5;
  int pareto_restarts = 1;
  par->add_option("--restarts", pareto_restarts, "Starts per weight")->check(CLI::PositiveNumber);
  par->add_option("--seed", oa.seed, "Seed for random restarts");
  par->add_option("--max-iter", oa.max_iter, "Iteration budget")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*sim) return run_simulate(common, no_check);
    if (*grad) return run_gradient(common, ga);
    if (*opt) return run_optimize(common, oa);
    if (*grid) return run_grid(common, ga, resolution);
    if (*par) {
      oa.restarts = pareto_restarts;
      return run_pareto(common, oa, weights);
    }
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "invalid scenario: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
