#include <gtest/gtest.h>

#include "mcflow/godunov.hpp"
#include "mcflow/scenario_io.hpp"
#include "support.hpp"

using namespace mcflow;

namespace {
const Greenshields kFast{80.0, 150.0};
const Greenshields kSlow{40.0, 150.0};
const std::vector<Greenshields> kPair{kFast, kSlow};
const std::vector<Greenshields> kSingle{kFast};
}  // namespace

TEST(Primitives, BranchesAndTies) {
  EXPECT_EQ(godunov_branch(1.0, 2.0).tag, tag::Demand);
  EXPECT_EQ(godunov_branch(3.0, 2.0).tag, tag::Supply);
  EXPECT_EQ(godunov_branch(2.0, 2.0).tag, tag::Demand | tag::NearTie);
  EXPECT_EQ(godunov_branch(2.0, 2.0 + 1e-7).tag & tag::NearTie, tag::NearTie);
  EXPECT_EQ(godunov_branch(2.0, 2.1).tag & tag::NearTie, 0);
  // merge: min{D, max{pS, S - others}}
  EXPECT_DOUBLE_EQ(merge_branch(5.0, 3.0, 4.0).value, 4.0);
  EXPECT_EQ(merge_branch(5.0, 3.0, 4.0).tag, tag::MergeResidual);
  EXPECT_EQ(merge_branch(5.0, 4.5, 4.0).tag, tag::MergePriority);
  EXPECT_EQ(merge_branch(1.0, 4.5, 4.0).tag, tag::MergeDemand);
  const std::vector<double> S = {4.0, 9.0}, a = {0.5, 0.5};
  EXPECT_DOUBLE_EQ(fifo_branch(10.0, S, a).value, 8.0);
  EXPECT_EQ(fifo_branch(10.0, S, a).tag, tag::FifoSupply + 0);
  const std::vector<double> a0 = {0.0, 1.0};
  EXPECT_DOUBLE_EQ(fifo_branch(10.0, S, a0).value, 9.0);
  EXPECT_EQ(buffer_branch(1.0, 0.0, 2000.0, 1e-3).tag, tag::BufferClamped);
  EXPECT_DOUBLE_EQ(buffer_update(1.0, 1000.0, 500.0, 1e-3), 1.5);
}

TEST(Primitives, BufferDemandModes) {
  EXPECT_DOUBLE_EQ(buffer_demand(0.0, 700.0, 3000.0, 1e-3, BufferDemand::Capped).value, 700.0);
  EXPECT_DOUBLE_EQ(buffer_demand(0.5, 700.0, 3000.0, 1e-3, BufferDemand::Saturated).value, 3000.0);
  // l/dt + F_in = 5700 exceeds Q(r_cr)
  EXPECT_DOUBLE_EQ(buffer_demand(5.0, 700.0, 3000.0, 1e-3, BufferDemand::Capped).value, 3000.0);
  const auto b = buffer_demand(1.0, 700.0, 3000.0, 1e-3, BufferDemand::Capped);
  EXPECT_DOUBLE_EQ(b.value, 1700.0);
  EXPECT_EQ(b.tag, tag::SourceDrain);
}

TEST(Link, FreeFlowAndCongested) {
  const std::vector<double> up = {30.0, 20.0}, empty = {0.0, 0.0};
  std::vector<std::uint8_t> tags;
  auto f = interior_flux(up, empty, kPair, &tags);
  // r = 50: D1 = 80 (2/3) 50, D2 = 40 (2/3) 50, k = (0.6, 0.4)
  EXPECT_NEAR(f[0], 0.6 * 80.0 * (2.0 / 3.0) * 50.0, 1e-9);
  EXPECT_NEAR(f[1], 0.4 * 40.0 * (2.0 / 3.0) * 50.0, 1e-9);
  EXPECT_EQ(tags[0], tag::Demand);
  const std::vector<double> jam = {60.0, 60.0};
  f = interior_flux(up, jam, kPair, &tags);
  // downstream r = 120: S1 = 80 (1/5) 120 = 1920 < D1
  EXPECT_NEAR(f[0], 0.6 * 1920.0, 1e-9);
  EXPECT_NEAR(f[1], 0.4 * 960.0, 1e-9);
  EXPECT_EQ(tags[0], tag::Supply);
  EXPECT_EQ(interior_flux(empty, jam, kPair), (std::vector<double>{0.0, 0.0}));
  const std::vector<double> bad = {100.0, 60.0};
  EXPECT_THROW(interior_flux(bad, empty, kPair), std::domain_error);
}

TEST(Merge, PriorityAndResidual) {
  const std::vector<std::vector<double>> in = {{60.0}, {40.0}};
  const std::vector<double> out = {0.0};
  const std::vector<std::vector<Greenshields>> din = {kSingle, kSingle};
  auto m = merge_flux(in, out, {{0.5, 0.5}}, din, kSingle);
  // D = (2880, 2346.67), S = 3000: both capped at max{1500, residual}
  EXPECT_NEAR(m.out[0][0], 1500.0, 1e-9);
  EXPECT_NEAR(m.out[1][0], 1500.0, 1e-9);
  EXPECT_NEAR(m.in[0], 3000.0, 1e-9);
  m = merge_flux(in, out, {{0.9, 0.1}}, din, kSingle);
  // road 1: min{2880, max{2700, 653.3}} = 2700; road 2: min{2346.7, max{300, 120}} = 300
  EXPECT_NEAR(m.out[0][0], 2700.0, 1e-9);
  EXPECT_NEAR(m.out[1][0], 300.0, 1e-9);
  EXPECT_EQ(m.tags[0][0], tag::MergePriority);
  EXPECT_THROW(merge_flux(in, out, {{0.7, 0.7}}, din, kSingle), std::invalid_argument);
}

TEST(Diverge, FifoAndNonFifo) {
  const std::vector<double> in = {60.0};
  const std::vector<std::vector<double>> out = {{120.0}, {0.0}};
  const std::vector<std::vector<Greenshields>> dout = {kSingle, kSingle};
  auto f = fifo_diverge_flux(in, out, {{0.5, 0.5}}, kSingle, dout);
  EXPECT_NEAR(f.out[0], 2880.0, 1e-9);
  f = fifo_diverge_flux(in, out, {{0.8, 0.2}}, kSingle, dout);
  // S_a / 0.8 = 2400 < 2880
  EXPECT_NEAR(f.out[0], 2400.0, 1e-9);
  EXPECT_NEAR(f.in[0][0], 1920.0, 1e-9);
  EXPECT_NEAR(f.in[1][0], 480.0, 1e-9);
  EXPECT_EQ(f.tags[0][0], tag::FifoSupply + 0);
  auto g = nonfifo_diverge_flux(in, out, {{0.8, 0.2}}, kSingle, dout);
  EXPECT_NEAR(g.in[0][0], 1920.0, 1e-9);
  EXPECT_NEAR(g.in[1][0], 576.0, 1e-9);
  EXPECT_NEAR(g.out[0], 2496.0, 1e-9);
}

TEST(Boundary, OriginAndDestination) {
  const std::vector<double> zero = {0.0, 0.0}, q = {1000.0, 500.0};
  auto g = origin_inflow(zero, zero, q, kPair);
  EXPECT_NEAR(g[0], 1000.0, 1e-9);
  EXPECT_NEAR(g[1], 500.0, 1e-9);
  const std::vector<double> buf = {5.0, 0.0};
  std::vector<std::uint8_t> tags;
  g = origin_inflow(buf, zero, q, kPair, 1e-3, BufferDemand::Saturated, &tags);
  // class 1 demand Q(r_cr) = 3000, residual 3000 - 500 = 2500 > share 1500
  EXPECT_NEAR(g[0], 2500.0, 1e-9);
  EXPECT_EQ(tags[0], tag::InflowResidual | tag::SourceSaturated);
  g = origin_inflow(buf, zero, q, kPair, 1.0, BufferDemand::Capped, &tags);
  EXPECT_NEAR(g[0], 1005.0, 1e-9);
  EXPECT_EQ(tag::source(tags[0]), tag::SourceDrain);
  const std::vector<double> last = {60.0, 0.0}, cap = {1000.0, 1000.0};
  const auto d = destination_outflow(last, cap, kPair);
  EXPECT_DOUBLE_EQ(d[0], 1000.0);
  EXPECT_DOUBLE_EQ(d[1], 0.0);
}

// Vector solvers and the network simulator agree on a single-step chain.
TEST(Simulator, MatchesVectorSolvers) {
  testsupport::Generator gen(11);
  for (int k = 0; k < 30; ++k) {
    auto rc = gen.make(6, 10, 1, false);
    const auto& m = rc->model;
    const auto rec = step(m, 0, rc->y0, rc->schedule.pieces[0]);
    for (std::size_t r = 0; r < m.net.roads.size(); ++r) {
      std::vector<Greenshields> d;
      for (int c = 0; c < 2; ++c) d.push_back(m.net.roads[r].diagram(c));
      for (int i = 1; i < m.net.roads[r].cells; ++i) {
        std::vector<double> up(2), dn(2);
        for (int c = 0; c < 2; ++c) {
          up[c] = rc->y0[m.topo.cell(c, static_cast<int>(r), i - 1)];
          dn[c] = rc->y0[m.topo.cell(c, static_cast<int>(r), i)];
        }
        const auto f = interior_flux(up, dn, d);
        for (int c = 0; c < 2; ++c)
          EXPECT_NEAR(rec.flux[m.topo.iface(c, static_cast<int>(r), i)], f[c], 1e-9 * (1.0 + std::abs(f[c])));
      }
    }
  }
}

// Invariant region and mass ledger on random CFL-satisfying scenarios. With
// capped buffer demand the ledger closes exactly; saturated demand can only
// create vehicles, when a queue shorter than dt * Q(r_cr) is clamped at zero.
TEST(Simulator, InvariantsAndMassLedger) {
  testsupport::Generator gen(12345);
  int created = 0;
  for (int k = 0; k < 100; ++k) {
    const bool capped = k % 2 == 0;
    auto rc = gen.make(6, 10, 2, true, capped ? BufferDemand::Capped : BufferDemand::Saturated);
    const auto& m = rc->model;
    const auto tr = simulate(m, rc->schedule, rc->y0);
    for (int nu = 0; nu < tr.steps; ++nu) {
      EXPECT_NO_THROW(check_state(m, tr.state(nu + 1), nu + 1));
      const double m0 = testsupport::total_mass(m, tr.state(nu)), m1 = testsupport::total_mass(m, tr.state(nu + 1));
      const double expected = m0 + m.grid.dt * (testsupport::arrival_rate(m, tr, nu) - testsupport::exit_rate(m, tr, nu));
      const double tol = 1e-9 * std::max(1.0, m0);
      if (capped) {
        EXPECT_LE(std::abs(m1 - expected), tol) << "case " << k << " step " << nu;
      } else {
        EXPECT_GE(m1, expected - tol) << "case " << k << " step " << nu;
        if (m1 > expected + tol) ++created;
      }
    }
  }
  EXPECT_GT(created, 0);
}

TEST(Simulator, Deterministic) {
  const auto m = testsupport::fig5_model();
  const auto lc = load_controls(m.net, testsupport::scenario_path("u0.json"));
  const auto a = simulate(m, lc.schedule), b = simulate(m, lc.schedule);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.tags, b.tags);
}

TEST(Simulator, ZeroInflowStaysEmpty) {
  auto net = load_network(testsupport::scenario_path("fig5.json"));
  for (auto& j : net.junctions)
    for (auto& s : j.inflow) s.value.assign(2, 0.0);
  const Model m(std::move(net));
  const auto tr = simulate(m, ControlSchedule::defaults(m.net));
  for (double v : tr.y) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(ttt(m, tr), 0.0);
}

TEST(Simulator, RejectsBadInitialState) {
  const auto m = testsupport::fig5_model();
  std::vector<double> y0(m.state_size(), 0.0);
  y0[m.topo.cell(0, 0, 0)] = 100.0;
  y0[m.topo.cell(1, 0, 0)] = 100.0;
  EXPECT_THROW(simulate(m, ControlSchedule::defaults(m.net), y0), std::exception);
}
