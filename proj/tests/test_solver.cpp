#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "oracles/probes.hpp"
#include "slwin/config.hpp"
#include "slwin/solver.hpp"

using namespace slwin;

namespace {

Forest single(int n) {
  GridLayout L;
  L.cells = {n, n, 1};
  L.max_depth = 2;
  L.subdiv = {{2, 2, 1}};
  return Forest(L);
}

LeafField leaf_rhs(const Forest& f, const std::function<double(const Vec3&)>& fn) {
  const auto leaves = f.leaves();
  LeafField rhs(leaves.size());
  for (std::size_t n = 0; n < leaves.size(); ++n) {
    const GridNode& g = f.node(leaves[n]);
    rhs[n].assign(g.fields.size(), 0.0);
    for (int j = 0; j < g.cells[1]; ++j)
      for (int i = 0; i < g.cells[0]; ++i) rhs[n][g.fields.index(i, j, 0)] = fn(g.cell_center(i, j, 0));
  }
  return rhs;
}

double zero_mean_value(const Forest& f, const Vec3& x) {
  double mean = 0.0, vol = 0.0;
  for (GridId id : f.leaves()) {
    const GridNode& g = f.node(id);
    for (int j = 0; j < g.cells[1]; ++j)
      for (int i = 0; i < g.cells[0]; ++i) {
        mean += g.fields(Quantity::p, i, j, 0) * g.cell_volume();
        vol += g.cell_volume();
      }
  }
  const GridNode& g = f.node(*f.find_leaf(x));
  const auto h = g.cell_width();
  const int i = static_cast<int>((x[0] - g.bbox.lo[0]) / h[0]);
  const int j = static_cast<int>((x[1] - g.bbox.lo[1]) / h[1]);
  return g.fields(Quantity::p, i, j, 0) - mean / vol;
}

}  // namespace

TEST(Params, Validation) {
  FluidParams p;
  EXPECT_NO_THROW(p.validate());
  p.rho = 0;
  EXPECT_THROW(p.validate(), SolverError);
  p = {};
  p.cfl = 1.5;
  EXPECT_THROW(p.validate(), SolverError);
  p = {};
  p.nu = -1;
  EXPECT_THROW(p.validate(), SolverError);
}

TEST(Boundary, MovingWallMustBeTangential) {
  BoundarySpec bc;
  bc[Face::yp] = {WallKind::moving_wall, {0.0, 1.0, 0.0}};
  EXPECT_THROW(bc.validate(), SolverError);
  EXPECT_NO_THROW(BoundarySpec::lid_driven_cavity().validate());
}

TEST(Intermediate, ZeroStaysZero) {
  Forest f = single(8);
  FluidParams p;
  compute_intermediate_velocity(f.node(0), p, 0.01, f.active_axes());
  for (double x : f.node(0).fields.raw(Quantity::us)) EXPECT_EQ(x, 0.0);
}

TEST(Intermediate, UniformFlowUnchanged) {
  Forest f = single(8);
  f.node(0).fields.fill(Quantity::u, 0.7);
  FluidParams p;
  compute_intermediate_velocity(f.node(0), p, 0.01, f.active_axes());
  for (int j = 0; j < 8; ++j)
    for (int i = 0; i < 8; ++i) {
      EXPECT_DOUBLE_EQ(f.node(0).fields(Quantity::us, i, j, 0), 0.7);
      EXPECT_EQ(f.node(0).fields(Quantity::vs, i, j, 0), 0.0);
    }
}

TEST(Intermediate, SingleCellMatchesHandStencil) {
  GridLayout L;
  L.cells = {1, 1, 1};
  Forest f(L);
  GridNode& g = f.node(0);
  const AxisSet axes{true, true, false};
  // Centre (u, v) and its four neighbours.
  g.fields(Quantity::u, 0, 0, 0) = 0.4;
  g.fields(Quantity::v, 0, 0, 0) = -0.2;
  g.fields(Quantity::u, -1, 0, 0) = 0.1;
  g.fields(Quantity::u, 1, 0, 0) = 0.9;
  g.fields(Quantity::u, 0, -1, 0) = 0.3;
  g.fields(Quantity::u, 0, 1, 0) = 0.6;
  g.fields(Quantity::v, -1, 0, 0) = 0.05;
  g.fields(Quantity::v, 1, 0, 0) = -0.4;
  g.fields(Quantity::v, 0, -1, 0) = 0.2;
  g.fields(Quantity::v, 0, 1, 0) = -0.1;
  FluidParams p;
  p.nu = 0.05;
  const double dt = 0.02, h = 1.0;
  compute_intermediate_velocity(g, p, dt, axes);

  // Scalar re-evaluation: F(q) = nu Lap q - (u dq/dx + v dq/dy), upwind.
  struct Nb {
    double c, xm, xp, ym, yp;
  };
  auto F = [&](Nb q, double u, double v) {
    const double lap = (q.xp - 2 * q.c + q.xm) / (h * h) + (q.yp - 2 * q.c + q.ym) / (h * h);
    const double dx = u > 0 ? (q.c - q.xm) / h : (q.xp - q.c) / h;
    const double dy = v > 0 ? (q.c - q.ym) / h : (q.yp - q.c) / h;
    return p.nu * lap - (u * dx + v * dy);
  };
  Nb U{0.4, 0.1, 0.9, 0.3, 0.6}, V{-0.2, 0.05, -0.4, 0.2, -0.1};
  const double uh = U.c + 0.5 * dt * F(U, U.c, V.c);
  const double vh = V.c + 0.5 * dt * F(V, U.c, V.c);
  // Second stage: halos held at the old values.
  Nb Uh = U, Vh = V;
  Uh.c = uh;
  Vh.c = vh;
  const double us = U.c + dt * F(Uh, uh, vh);
  const double vs = V.c + dt * F(Vh, uh, vh);
  EXPECT_NEAR(g.fields(Quantity::us, 0, 0, 0), us, 1e-15);
  EXPECT_NEAR(g.fields(Quantity::vs, 0, 0, 0), vs, 1e-15);
}

TEST(Intermediate, DetectsNonFinite) {
  Forest f = single(4);
  f.node(0).fields(Quantity::u, 1, 1, 0) = std::nan("");
  FluidParams p;
  EXPECT_THROW(compute_intermediate_velocity(f.node(0), p, 0.01, f.active_axes()), SolverError);
}

TEST(Poisson, ZeroRhsGivesZeroPressure) {
  Forest f = single(16);
  f.node(0).fields.fill(Quantity::p, 3.0);
  const auto model = make_boundary_model(BoundarySpec{}, f.active_axes());
  FluidParams p;
  solve_poisson(f, leaf_rhs(f, [](const Vec3&) { return 0.0; }), p, model);
  for (int j = 0; j < 16; ++j)
    for (int i = 0; i < 16; ++i) EXPECT_NEAR(f.node(0).fields(Quantity::p, i, j, 0), 0.0, 1e-12);
}

TEST(Poisson, ManufacturedSecondOrder) {
  const double pi = std::numbers::pi;
  auto exact = [pi](const Vec3& x) { return std::cos(pi * x[0]) * std::cos(pi * x[1]); };
  double prev = 0.0;
  for (int n : {16, 32, 64}) {
    Forest f = single(n);
    const auto model = make_boundary_model(BoundarySpec{}, f.active_axes());
    FluidParams p;
    solve_poisson(f, leaf_rhs(f, [&](const Vec3& x) { return -2 * pi * pi * exact(x); }), p, model);
    double err = 0.0;
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const Vec3 x = f.node(0).cell_center(i, j, 0);
        err = std::max(err, std::abs(zero_mean_value(f, x) - exact(x)));
      }
    if (prev > 0.0) EXPECT_GE(prev / err, 3.5);
    prev = err;
  }
}

TEST(Poisson, TwoGridForestMatchesSingleFineGrid) {
  const double pi = std::numbers::pi;
  auto rhs_fn = [pi](const Vec3& x) { return std::cos(pi * x[0]) * std::cos(2 * pi * x[1]) + x[0] - 0.5; };
  Forest fine = single(20);
  Forest split = single(10);
  split.refine(0);
  FluidParams p;
  const auto m1 = make_boundary_model(BoundarySpec{}, fine.active_axes());
  const auto m2 = make_boundary_model(BoundarySpec{}, split.active_axes());
  solve_poisson(fine, leaf_rhs(fine, rhs_fn), p, m1);
  solve_poisson(split, leaf_rhs(split, rhs_fn), p, m2);
  double worst = 0.0;
  for (int j = 0; j < 20; ++j)
    for (int i = 0; i < 20; ++i) {
      const Vec3 x{(i + 0.5) / 20, (j + 0.5) / 20, 0.5};
      worst = std::max(worst, std::abs(zero_mean_value(fine, x) - zero_mean_value(split, x)));
    }
  EXPECT_LE(worst, 10 * p.poisson_tol);
}

TEST(Poisson, JacobiAgreesWithDirect) {
  const double pi = std::numbers::pi;
  auto rhs_fn = [pi](const Vec3& x) { return std::cos(pi * x[0]) * std::cos(pi * x[1]); };
  Forest a = single(8), b = single(8);
  const auto model = make_boundary_model(BoundarySpec{}, a.active_axes());
  FluidParams p;
  p.poisson_method = PoissonMethod::jacobi;
  p.poisson_tol = 1e-10;
  p.poisson_max_iter = 100000;
  const auto rep = solve_poisson(a, leaf_rhs(a, rhs_fn), p, model);
  EXPECT_TRUE(rep.converged);
  p.poisson_method = PoissonMethod::direct;
  solve_poisson(b, leaf_rhs(b, rhs_fn), p, model);
  for (int j = 0; j < 8; ++j)
    for (int i = 0; i < 8; ++i) {
      const Vec3 x{(i + 0.5) / 8, (j + 0.5) / 8, 0.5};
      EXPECT_NEAR(zero_mean_value(a, x), zero_mean_value(b, x), 1e-8);
    }
}

TEST(Poisson, JacobiCapReturnsUnconverged) {
  Forest f = single(16);
  const auto model = make_boundary_model(BoundarySpec{}, f.active_axes());
  FluidParams p;
  p.poisson_method = PoissonMethod::jacobi;
  p.poisson_max_iter = 3;
  const auto rep =
      solve_poisson(f, leaf_rhs(f, [](const Vec3& x) { return std::cos(3.14159 * x[0]); }), p, model);
  EXPECT_FALSE(rep.converged);
  EXPECT_EQ(rep.iterations, 3);
  EXPECT_GT(rep.residual, p.poisson_tol);
}

TEST(Correct, ConstantPressureLeavesStarred) {
  Forest f = single(6);
  GridNode& g = f.node(0);
  g.fields.fill(Quantity::us, 0.25);
  g.fields.fill(Quantity::vs, -0.5);
  g.fields.fill(Quantity::p, 4.0);
  FluidParams p;
  correct_velocity(g, p, 0.1, f.active_axes());
  for (int j = 0; j < 6; ++j)
    for (int i = 0; i < 6; ++i) {
      EXPECT_EQ(g.fields(Quantity::u, i, j, 0), 0.25);
      EXPECT_EQ(g.fields(Quantity::v, i, j, 0), -0.5);
    }
}

TEST(Correct, LinearPressureUniformCorrection) {
  Forest f = single(6);
  GridNode& g = f.node(0);
  const double a = 2.5, dt = 0.1;
  for (int j = -1; j <= 6; ++j)
    for (int i = -1; i <= 6; ++i) g.fields(Quantity::p, i, j, 0) = a * g.cell_center(i, j, 0)[0];
  FluidParams p;
  p.rho = 2.0;
  correct_velocity(g, p, dt, f.active_axes());
  for (int j = 0; j < 6; ++j)
    for (int i = 0; i < 6; ++i) {
      EXPECT_NEAR(g.fields(Quantity::u, i, j, 0), -dt / p.rho * a, 1e-12);
      EXPECT_NEAR(g.fields(Quantity::v, i, j, 0), 0.0, 1e-12);
    }
}

TEST(Step, ZeroLidStaysZero) {
  SimConfig c = cavity_config();
  c.refine_to_depth = 1;
  c.boundary = BoundarySpec{};
  Forest f = build_forest(c);
  for (int s = 0; s < 50; ++s) step(f, c.fluid, c.boundary);
  for (const auto& g : f.nodes())
    for (double x : g.fields.raw(Quantity::u)) ASSERT_EQ(x, 0.0);
}

TEST(Step, DivergenceAfterCorrection) {
  SimConfig c = cavity_config();
  c.refine_to_depth = 1;
  Forest f = build_forest(c);
  const auto model = make_boundary_model(c.boundary, f.active_axes());
  StepReport rep;
  for (int s = 0; s < 20; ++s) rep = step(f, c.fluid, model);
  EXPECT_LE(rep.max_div, 10 * c.fluid.poisson_tol * c.fluid.rho / rep.dt);
  EXPECT_LE(oracle::face_divergence(f, c.fluid.rho, rep.dt), 10 * c.fluid.poisson_tol * c.fluid.rho / rep.dt);
  EXPECT_TRUE(rep.converged);
}

TEST(Step, HighReynoldsStaysFinite) {
  SimConfig c = cavity_config();
  c.fluid.nu = 3.125e-4;
  Forest f = build_forest(c);
  const auto model = make_boundary_model(c.boundary, f.active_axes());
  DirectPoisson cache;
  EXPECT_NO_THROW(for (int s = 0; s < 100; ++s) step(f, c.fluid, model, &cache));
}

TEST(Step, AdaptiveDtFormula) {
  Forest f = single(10);
  f.node(0).fields(Quantity::u, 3, 3, 0) = 2.0;
  FluidParams p;
  p.nu = 0.1;
  p.cfl = 0.5;
  const double h = 0.1;
  EXPECT_DOUBLE_EQ(stable_dt(f, p), 0.5 * std::min(h / 2.0, h * h / (4 * p.nu)));
}

TEST(Step, MetricsCsv) {
  std::ostringstream os;
  MetricsLog log(os);
  StepReport r;
  r.dt = 0.003;
  r.max_div = 1e-12;
  r.poisson_iterations = 1;
  log.record(0.003, r);
  EXPECT_EQ(os.str().rfind("t,dt,max_div,poisson_iterations,residual\n", 0), 0u);
  EXPECT_NE(os.str().find("0.003,0.003,"), std::string::npos);
}
