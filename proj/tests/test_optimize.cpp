#include <gtest/gtest.h>

#include <chrono>

#include "mcflow/optimize.hpp"
#include "support.hpp"

using namespace mcflow;

namespace {
Problem quadratic(std::vector<double> c) {
  Problem p;
  p.value = [c](std::span<const double> u) {
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += (u[i] - c[i]) * (u[i] - c[i]);
    return s;
  };
  p.value_and_gradient = [c, v = p.value](std::span<const double> u, std::vector<double>& g) {
    g.resize(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) g[i] = 2.0 * (u[i] - c[i]);
    return v(u);
  };
  p.bounds = Bounds::unit_box(static_cast<int>(c.size()));
  return p;
}

void expect_armijo(const OptResult& r, double c) {
  for (std::size_t k = 0; k + 1 < r.log.size(); ++k) {
    EXPECT_LE(r.log[k + 1].value, r.log[k].value) << "iteration " << k;
    if (r.log[k].step > 0.0) EXPECT_GE(r.log[k].armijo_margin, 0.0);
  }
  (void)c;
}
}  // namespace

TEST(Projection, Box) {
  const auto b = Bounds::unit_box(3);
  const std::vector<double> u = {0.4, 1.2, -0.3};
  EXPECT_EQ(project_box(u, b), (std::vector<double>{0.4, 1.0, 0.0}));
}

TEST(Projection, SimplexProperties) {
  testsupport::Generator gen(5);
  for (int k = 0; k < 200; ++k) {
    const int d = gen.integer(2, 5);
    std::vector<double> v(d);
    for (double& x : v) x = gen.uniform(-2.0, 2.0);
    const auto p = project_simplex(v);
    double s = 0.0;
    for (double x : p) {
      EXPECT_GE(x, 0.0);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    const auto pp = project_simplex(p);
    for (int i = 0; i < d; ++i) EXPECT_NEAR(pp[i], p[i], 1e-12);
    // no random simplex point is closer to v
    std::mt19937_64 rng(k);
    const Bounds b{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0), std::vector<int>(d, 0)};
    for (int t = 0; t < 20; ++t) {
      const auto q = random_point(b, rng);
      double dp = 0.0, dq = 0.0;
      for (int i = 0; i < d; ++i) {
        dp += (p[i] - v[i]) * (p[i] - v[i]);
        dq += (q[i] - v[i]) * (q[i] - v[i]);
      }
      EXPECT_LE(dp, dq + 1e-12);
    }
  }
}

TEST(Minimize, QuadraticOnBox) {
  const auto r = minimize(quadratic({0.3, 1.4, -0.2}), std::vector<double>{0.5, 0.5, 0.5});
  EXPECT_EQ(r.status, OptStatus::Optimality);
  EXPECT_NEAR(r.u[0], 0.3, 1e-6);
  EXPECT_NEAR(r.u[1], 1.0, 1e-6);
  EXPECT_NEAR(r.u[2], 0.0, 1e-6);
  expect_armijo(r, 1e-4);
}

TEST(Minimize, ZeroGradientReturnsStart) {
  auto net = load_network(testsupport::scenario_path("fig5.json"));
  for (auto& j : net.junctions)
    for (auto& s : j.inflow) s.value.assign(2, 0.0);
  const Model m(std::move(net));
  const auto lc = load_controls(m.net, testsupport::scenario_path("u0.json"));
  NetworkProblem np(m, Objective::ttt(), lc.schedule, lc.layout);
  const auto r = minimize(np.problem(), np.start());
  EXPECT_EQ(r.status, OptStatus::Optimality);
  EXPECT_EQ(r.log.size(), 1u);
  EXPECT_EQ(r.u, np.start());
}

TEST(Minimize, BudgetAndValidation) {
  OptimizerConfig cfg;
  cfg.max_iterations = 2;
  const auto r = minimize(quadratic({0.3, 0.7}), std::vector<double>{0.0, 0.0}, cfg);
  EXPECT_EQ(r.status, OptStatus::MaxIterations);
  cfg.shrink = 1.5;
  EXPECT_THROW(minimize(quadratic({0.3}), std::vector<double>{0.0}, cfg), std::invalid_argument);
  EXPECT_THROW(minimize(quadratic({0.3}), std::vector<double>{2.0}), std::invalid_argument);
}

TEST(Minimize, SimplexGroup) {
  // min |u - c|^2 on the simplex: the projection of c
  Problem p = quadratic({0.9, 0.5, -0.2});
  p.bounds.group = {0, 0, 0};
  const auto r = minimize(p, std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3});
  EXPECT_EQ(r.status, OptStatus::Optimality);
  const auto ref = project_simplex({0.9, 0.5, -0.2});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(r.u[i], ref[i], 1e-6);
}

TEST(Multistart, DeterministicForSeed) {
  const auto p = quadratic({0.3, 0.7});
  const auto a = multistart(p, std::vector<double>{0.0, 0.0}, {}, 5, 42, 1);
  const auto b = multistart(p, std::vector<double>{0.0, 0.0}, {}, 5, 42, 3);
  EXPECT_EQ(a.best.u, b.best.u);
  EXPECT_EQ(a.best_start, b.best_start);
}

TEST(Pareto, DominanceFilter) {
  ParetoPoint a{0, {}, 1.0, 2.0}, b{0, {}, 2.0, 1.0}, c{0, {}, 2.0, 2.0};
  EXPECT_FALSE(dominates(a, b));
  EXPECT_TRUE(dominates(a, c));
  EXPECT_FALSE(dominates(a, a));
  // rounding-level differences do not make a point non-dominated
  ParetoPoint d{0, {}, 1.5, 2.0 * (1.0 - 1e-14)};
  EXPECT_TRUE(dominates(a, d));
  EXPECT_TRUE(same_objectives(a, ParetoPoint{0, {}, 1.0 + 1e-12, 2.0}));
  EXPECT_FALSE(dominates(a, ParetoPoint{0, {}, 1.0 + 1e-12, 2.0}));
}

// fig5 with n = 1 from u0: the adjoint-driven optimum beats the starting
// TTT and lands within 1% of the best of an 11-point-per-axis 4-D lattice.
TEST(Fig5, OptimizerAgainstCoarseGrid) {
  const auto m = testsupport::fig5_model();
  const auto lc = load_controls(m.net, testsupport::scenario_path("u0.json"));
  NetworkProblem np(m, Objective::ttt(), lc.schedule, lc.layout);
  const auto r = minimize(np.problem(), np.start());
  expect_armijo(r, 1e-4);
  EXPECT_LE(r.value, 1439.0);
  EXPECT_LE(r.value, r.log.front().value);
  const auto grid = grid_search(m, Objective::ttt(), lc.schedule, lc.layout, 11, 0);
  EXPECT_LE(r.value, 1.01 * grid.min_value) << "grid best " << grid.min_value;
}

// Adjoint and FD gradients drive the optimizer to the same TTT within 0.5%.
TEST(Fig5, AdjointFdParity) {
  const auto m = testsupport::fig5_model();
  const auto lc = load_controls(m.net, testsupport::scenario_path("u0.json"));
  NetworkProblem adj(m, Objective::ttt(), lc.schedule, lc.layout, GradientMethod::Adjoint);
  NetworkProblem fd(m, Objective::ttt(), lc.schedule, lc.layout, GradientMethod::Fd);
  const auto ra = minimize(adj.problem(), adj.start());
  const auto rf = minimize(fd.problem(), fd.start());
  EXPECT_LE(std::abs(ra.value - rf.value), 0.005 * ra.value) << ra.value << " vs " << rf.value;
}

// Time per iteration: with a fixed iteration budget the adjoint optimizer's
// time grows at most 3x from n = 1 to 16, the FD optimizer's at least 8x.
TEST(Fig5, OptimizerScaling) {
  const auto m = testsupport::fig5_model();
  OptimizerConfig cfg;
  cfg.max_iterations = 3;
  auto time_of = [&](int n, GradientMethod method) {
    const auto lc = load_controls(m.net, testsupport::scenario_path("u0.json"), n);
    NetworkProblem np(m, Objective::ttt(), lc.schedule, lc.layout, method);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = minimize(np.problem(), np.start(), cfg);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return s / static_cast<double>(r.log.size());
  };
  const double a1 = time_of(1, GradientMethod::Adjoint), a16 = time_of(16, GradientMethod::Adjoint);
  const double f1 = time_of(1, GradientMethod::Fd), f16 = time_of(16, GradientMethod::Fd);
  EXPECT_LE(a16 / a1, 3.0);
  EXPECT_GE(f16 / f1, 8.0);
}
