#ifndef SLWIN_SOLVER_HPP
#define SLWIN_SOLVER_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <vector>

#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include "exchange.hpp"
#include "hiergrid.hpp"

namespace slwin {

class SolverError : public Error {
 public:
  using Error::Error;
};

enum class WallKind : std::uint8_t { no_slip = 0, moving_wall = 1, inflow = 2, outflow = 3 };

struct WallCondition {
  WallKind kind = WallKind::no_slip;
  /// Wall velocity (moving_wall, tangential) or inflow velocity.
  Vec3 velocity{0.0, 0.0, 0.0};

  friend bool operator==(const WallCondition&, const WallCondition&) = default;
};

/// Boundary condition per domain face, indexed by Face.
struct BoundarySpec {
  std::array<WallCondition, 6> faces{};

  WallCondition& operator[](Face f) { return faces[static_cast<int>(f)]; }
  const WallCondition& operator[](Face f) const { return faces[static_cast<int>(f)]; }

  /// Unit-cavity walls, with the `lid` face sliding at `speed` along `axis`.
  static BoundarySpec lid_driven_cavity(double speed = 1.0, Face lid = Face::yp, int axis = 0) {
    BoundarySpec bc;
    Vec3 vel{0.0, 0.0, 0.0};
    vel[axis] = speed;
    bc[lid] = {WallKind::moving_wall, vel};
    bc.validate();
    return bc;
  }

  bool has_outflow() const {
    return std::any_of(faces.begin(), faces.end(),
                       [](const WallCondition& w) { return w.kind == WallKind::outflow; });
  }

  void validate() const {
    for (Face f : kAllFaces) {
      const auto& w = (*this)[f];
      if (w.kind == WallKind::moving_wall && std::abs(w.velocity[face_axis(f)]) > 1e-12)
        throw SolverError("moving wall on face " + face_name(f) +
                          " must have a tangential velocity");
      for (double c : w.velocity)
        if (!std::isfinite(c)) throw SolverError("non-finite wall velocity on " + face_name(f));
    }
  }

  friend bool operator==(const BoundarySpec&, const BoundarySpec&) = default;
};

enum class PoissonMethod : std::uint8_t { jacobi = 0, direct = 1 };

struct FluidParams {
  double rho = 1.0;
  double nu = 0.01;
  double dt = 1e-3;
  double cfl = 0.5;
  double poisson_tol = 1e-8;
  int poisson_max_iter = 20000;
  bool adaptive_dt = false;
  PoissonMethod poisson_method = PoissonMethod::direct;
  double jacobi_omega = 0.8;

  void validate() const {
    if (!(rho > 0.0)) throw SolverError("rho must be > 0");
    if (!(nu >= 0.0)) throw SolverError("nu must be >= 0");
    if (!(dt > 0.0)) throw SolverError("dt must be > 0");
    if (!(cfl > 0.0 && cfl <= 1.0)) throw SolverError("cfl must lie in (0, 1]");
    if (!(poisson_tol > 0.0)) throw SolverError("poisson_tol must be > 0");
    if (poisson_max_iter < 1) throw SolverError("poisson_max_iter must be >= 1");
    if (!(jacobi_omega > 0.0 && jacobi_omega <= 1.0))
      throw SolverError("jacobi_omega must lie in (0, 1]");
  }
};

/// Ghost values for one wall. Velocity ghosts mirror about the wall value so
/// the face average equals it; pressure is zero-gradient except at outflow
/// (p = 0 on the face). Homogeneous axes just copy the interior.
inline void apply_wall(GridNode& g, Face f, const QuantityMask& mask, const WallCondition& wc,
                       const AxisSet& axes) {
  const bool homogeneous = !axes[face_axis(f)];
  for (int q = 0; q < kQuantityCount; ++q) {
    if (!mask.test(q)) continue;
    const auto qq = static_cast<Quantity>(q);
    double* d = g.fields.raw(qq).data();
    double sign = 1.0, offset = 0.0;
    if (homogeneous) {
    } else if (qq == Quantity::p) {
      sign = wc.kind == WallKind::outflow ? -1.0 : 1.0;
    } else if (wc.kind == WallKind::no_slip) {
      sign = -1.0;
    } else if (wc.kind != WallKind::outflow) {
      sign = -1.0;
      offset = 2.0 * wc.velocity[component_axis(qq)];
    }
    for_each_face_index(g.fields, f,
                        [=](std::size_t gh, std::size_t in) { d[gh] = offset + sign * d[in]; });
  }
}

/// Physical-boundary callback for the exchange cycle.
inline PhysicalBoundary make_physical_boundary(const BoundarySpec& bc, const AxisSet& axes) {
  return [bc, axes](GridNode& g, Face f, const QuantityMask& mask) {
    apply_wall(g, f, mask, bc[f], axes);
  };
}

/// Ghost filling for the physical faces plus the pressure condition each
/// domain face imposes (true: p = 0 on the face, false: zero gradient).
struct BoundaryModel {
  PhysicalBoundary fill = zero_gradient_boundary;
  std::array<bool, 6> pressure_dirichlet{};

  /// Pure-Neumann pressure problem: p only defined up to a constant.
  bool singular() const {
    return std::none_of(pressure_dirichlet.begin(), pressure_dirichlet.end(),
                        [](bool b) { return b; });
  }
};

inline BoundaryModel make_boundary_model(const BoundarySpec& bc, const AxisSet& axes) {
  BoundaryModel m;
  m.fill = make_physical_boundary(bc, axes);
  for (Face f : kAllFaces)
    m.pressure_dirichlet[static_cast<int>(f)] =
        axes[face_axis(f)] && bc[f].kind == WallKind::outflow;
  return m;
}

namespace detail {

/// Precomputed strides and spacings for the 7-point stencils on one grid.
struct Stencil {
  std::array<std::ptrdiff_t, 3> s{};
  Vec3 inv_h{};
  Vec3 inv_h2{};
  AxisSet axes{};

  Stencil(const GridNode& g, const AxisSet& active) : axes(active) {
    const auto h = g.cell_width();
    for (int a = 0; a < 3; ++a) {
      s[a] = static_cast<std::ptrdiff_t>(g.fields.stride(a));
      inv_h[a] = 1.0 / h[a];
      inv_h2[a] = 1.0 / (h[a] * h[a]);
    }
  }
};

template <class Fn>
void for_each_interior(const GridNode& g, Fn&& fn) {
  for (int k = 0; k < g.cells[2]; ++k)
    for (int j = 0; j < g.cells[1]; ++j)
      for (int i = 0; i < g.cells[0]; ++i) fn(i, j, k, g.fields.index(i, j, k));
}

inline bool solid_at(const GridNode& g, std::size_t c) { return !g.solid.empty() && g.solid[c]; }

}  // namespace detail

/// ν Δq − (v·∇) q for velocity component `comp` at linear cell `c`, using the
/// source velocity starting at `base` (Quantity::u or Quantity::us): central
/// diffusion, first-order upwind advection.
inline double momentum_tendency(const GridNode& g, Quantity base, int comp, std::size_t c,
                                double nu, const AxisSet& axes) {
  const detail::Stencil st(g, axes);
  const int b = static_cast<int>(base);
  const double* q = g.fields.raw(static_cast<Quantity>(b + comp)).data();
  const double val = q[c];
  double diff = 0.0, adv = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (!axes[a]) continue;
    const double lo = q[c - st.s[a]], hi = q[c + st.s[a]];
    diff += (hi - 2.0 * val + lo) * st.inv_h2[a];
    const double vel = g.fields.raw(static_cast<Quantity>(b + a))[c];
    adv += vel * (vel > 0.0 ? (val - lo) : (hi - val)) * st.inv_h[a];
  }
  return nu * diff - adv;
}

namespace detail {

/// dst = u + dt * F(src) on the interior of one grid, for all active components.
inline void advance_stage(const GridNode& g, Quantity src, double dt, double nu,
                          const AxisSet& axes, std::array<std::vector<double>, 3>& dst) {
  const Stencil st(g, axes);
  for (int comp = 0; comp < 3; ++comp) dst[comp].assign(g.fields.size(), 0.0);
  const int b = static_cast<int>(src);
  std::array<const double*, 3> q{}, u{};
  for (int a = 0; a < 3; ++a) {
    q[a] = g.fields.raw(static_cast<Quantity>(b + a)).data();
    u[a] = g.fields.raw(velocity_component(a)).data();
  }
  for_each_interior(g, [&](int, int, int, std::size_t c) {
    if (solid_at(g, c)) return;
    for (int comp = 0; comp < 3; ++comp) {
      if (!axes[comp]) {
        dst[comp][c] = u[comp][c];
        continue;
      }
      const double* f = q[comp];
      const double val = f[c];
      double diff = 0.0, adv = 0.0;
      for (int a = 0; a < 3; ++a) {
        if (!axes[a]) continue;
        const double lo = f[c - st.s[a]], hi = f[c + st.s[a]];
        diff += (hi - 2.0 * val + lo) * st.inv_h2[a];
        const double vel = q[a][c];
        adv += vel * (vel > 0.0 ? (val - lo) : (hi - val)) * st.inv_h[a];
      }
      dst[comp][c] = u[comp][c] + dt * (nu * diff - adv);
    }
  });
}

inline void store_starred(GridNode& g, const std::array<std::vector<double>, 3>& src) {
  for (int comp = 0; comp < 3; ++comp) {
    auto dst = g.fields.raw(starred_component(comp));
    for_each_interior(g, [&](int, int, int, std::size_t c) { dst[c] = src[comp][c]; });
  }
}

inline void check_finite(const GridNode& g, Quantity q) {
  bool bad = false;
  for_each_interior(g, [&](int i, int j, int k, std::size_t c) {
    if (!bad && !std::isfinite(g.fields.raw(q)[c])) {
      bad = true;
      throw SolverError("non-finite value in grid " + std::to_string(g.id) + " cell (" +
                        std::to_string(i) + "," + std::to_string(j) + "," + std::to_string(k) +
                        ")");
    }
  });
}

}  // namespace detail

/// Single-grid intermediate velocity with the current halos held fixed for
/// both stages of the midpoint scheme.
inline void compute_intermediate_velocity(GridNode& g, const FluidParams& params, double dt,
                                          const AxisSet& axes = {true, true, true}) {
  std::array<std::vector<double>, 3> tmp;
  detail::advance_stage(g, Quantity::u, 0.5 * dt, params.nu, axes, tmp);
  for (int comp = 0; comp < 3; ++comp) {
    auto us = g.fields.raw(starred_component(comp));
    auto u = g.fields.raw(velocity_component(comp));
    std::copy(u.begin(), u.end(), us.begin());
  }
  detail::store_starred(g, tmp);
  detail::advance_stage(g, Quantity::us, dt, params.nu, axes, tmp);
  detail::store_starred(g, tmp);
  for (int comp = 0; comp < 3; ++comp) detail::check_finite(g, starred_component(comp));
}

/// Midpoint (two-stage) explicit predictor on all leaves, with an exchange
/// cycle on the starred velocity after each stage.
inline void compute_intermediate_velocity(Forest& forest, const FluidParams& params, double dt,
                                          const PhysicalBoundary& bc) {
  const auto leaves = forest.leaves();
  const auto& axes = forest.active_axes();
  std::vector<std::array<std::vector<double>, 3>> tmp(leaves.size());
  for (std::size_t n = 0; n < leaves.size(); ++n)
    detail::advance_stage(forest.node(leaves[n]), Quantity::u, 0.5 * dt, params.nu, axes, tmp[n]);
  for (std::size_t n = 0; n < leaves.size(); ++n) detail::store_starred(forest.node(leaves[n]), tmp[n]);
  run_exchange_cycle(forest, kStarred, bc);
  for (std::size_t n = 0; n < leaves.size(); ++n)
    detail::advance_stage(forest.node(leaves[n]), Quantity::us, dt, params.nu, axes, tmp[n]);
  for (std::size_t n = 0; n < leaves.size(); ++n) detail::store_starred(forest.node(leaves[n]), tmp[n]);
  run_exchange_cycle(forest, kStarred, bc);
  for (GridId id : leaves)
    for (int comp = 0; comp < 3; ++comp) detail::check_finite(forest.node(id), starred_component(comp));
}

/// Per-leaf interior vectors, ordered like Forest::leaves(), indexed by the
/// grid's linear (haloed) cell index.
using LeafField = std::vector<std::vector<double>>;

/// (ρ/dt) times the divergence of the face-averaged intermediate velocity.
inline LeafField pressure_rhs(const Forest& forest, const FluidParams& params, double dt) {
  const auto leaves = forest.leaves();
  const auto& axes = forest.active_axes();
  LeafField rhs(leaves.size());
  for (std::size_t n = 0; n < leaves.size(); ++n) {
    const GridNode& g = forest.node(leaves[n]);
    const detail::Stencil st(g, axes);
    rhs[n].assign(g.fields.size(), 0.0);
    detail::for_each_interior(g, [&](int, int, int, std::size_t c) {
      if (detail::solid_at(g, c)) return;
      double div = 0.0;
      for (int a = 0; a < 3; ++a) {
        if (!axes[a]) continue;
        const double* us = g.fields.raw(starred_component(a)).data();
        const auto s = st.s[a];
        const double fp = detail::solid_at(g, c + s) ? 0.0 : 0.5 * (us[c] + us[c + s]);
        const double fm = detail::solid_at(g, c - s) ? 0.0 : 0.5 * (us[c] + us[c - s]);
        div += (fp - fm) * st.inv_h[a];
      }
      rhs[n][c] = params.rho / dt * div;
    });
  }
  return rhs;
}

namespace detail {

/// Σ over fluid face neighbours (p_n − p_c)/h².
inline double laplacian_at(const GridNode& g, const Stencil& st, const double* p, std::size_t c) {
  double acc = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (!st.axes[a]) continue;
    const auto s = st.s[a];
    if (!solid_at(g, c + s)) acc += (p[c + s] - p[c]) * st.inv_h2[a];
    if (!solid_at(g, c - s)) acc += (p[c - s] - p[c]) * st.inv_h2[a];
  }
  return acc;
}

inline double diagonal_at(const GridNode& g, const Stencil& st, std::size_t c) {
  double d = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (!st.axes[a]) continue;
    if (!solid_at(g, c + st.s[a])) d += st.inv_h2[a];
    if (!solid_at(g, c - st.s[a])) d += st.inv_h2[a];
  }
  return d;
}

inline double fluid_mean(const Forest& forest, const std::vector<GridId>& leaves,
                         const LeafField& x) {
  double sum = 0.0, vol = 0.0;
  for (std::size_t n = 0; n < leaves.size(); ++n) {
    const GridNode& g = forest.node(leaves[n]);
    const double cv = g.cell_volume();
    for_each_interior(g, [&](int, int, int, std::size_t c) {
      if (solid_at(g, c)) return;
      sum += x[n][c] * cv;
      vol += cv;
    });
  }
  return vol > 0.0 ? sum / vol : 0.0;
}

inline void subtract_mean(const Forest& forest, const std::vector<GridId>& leaves, LeafField& x) {
  const double m = fluid_mean(forest, leaves, x);
  for (std::size_t n = 0; n < leaves.size(); ++n) {
    const GridNode& g = forest.node(leaves[n]);
    for_each_interior(g, [&](int, int, int, std::size_t c) {
      if (!solid_at(g, c)) x[n][c] -= m;
    });
  }
}

inline LeafField gather_pressure(const Forest& forest, const std::vector<GridId>& leaves) {
  LeafField x(leaves.size());
  for (std::size_t n = 0; n < leaves.size(); ++n) {
    const auto p = forest.node(leaves[n]).fields.raw(Quantity::p);
    x[n].assign(p.begin(), p.end());
  }
  return x;
}

inline void scatter_pressure(Forest& forest, const std::vector<GridId>& leaves,
                             const LeafField& x) {
  for (std::size_t n = 0; n < leaves.size(); ++n) {
    GridNode& g = forest.node(leaves[n]);
    auto p = g.fields.raw(Quantity::p);
    for_each_interior(g, [&](int, int, int, std::size_t c) { p[c] = x[n][c]; });
  }
}

}  // namespace detail

struct PoissonReport {
  int iterations = 0;
  /// Constant added to the right-hand side to make a singular system
  /// solvable (zero on uniform-level forests up to round-off).
  double compatibility_shift = 0.0;
  double residual = 0.0;
  bool converged = false;
};

/// Max-norm residual of ∇²p = rhs over fluid leaf cells, using the current
/// pressure halos.
inline double poisson_residual(const Forest& forest, const LeafField& rhs) {
  const auto leaves = forest.leaves();
  double r = 0.0;
  for (std::size_t n = 0; n < leaves.size(); ++n) {
    const GridNode& g = forest.node(leaves[n]);
    const detail::Stencil st(g, forest.active_axes());
    const double* p = g.fields.raw(Quantity::p).data();
    detail::for_each_interior(g, [&](int, int, int, std::size_t c) {
      if (detail::solid_at(g, c)) return;
      r = std::max(r, std::abs(detail::laplacian_at(g, st, p, c) - rhs[n][c]));
    });
  }
  return r;
}

namespace detail {

inline PoissonReport jacobi_solve(Forest& forest, const LeafField& rhs, const FluidParams& params,
                                  const PhysicalBoundary& bc, bool singular) {
  const auto leaves = forest.leaves();
  const double omega = params.jacobi_omega;
  PoissonReport rep;
  LeafField next(leaves.size());
  run_exchange_cycle(forest, kPressure, bc);
  rep.residual = poisson_residual(forest, rhs);
  while (rep.residual > params.poisson_tol && rep.iterations < params.poisson_max_iter) {
    for (std::size_t n = 0; n < leaves.size(); ++n) {
      const GridNode& g = forest.node(leaves[n]);
      const Stencil st(g, forest.active_axes());
      const double* p = g.fields.raw(Quantity::p).data();
      next[n].assign(p, p + g.fields.size());
      for_each_interior(g, [&](int, int, int, std::size_t c) {
        if (solid_at(g, c)) {
          next[n][c] = 0.0;
          return;
        }
        const double d = diagonal_at(g, st, c);
        if (d == 0.0) return;
        const double lap = laplacian_at(g, st, p, c);
        next[n][c] = p[c] + omega * (lap - rhs[n][c]) / d;
      });
    }
    if (singular) subtract_mean(forest, leaves, next);
    scatter_pressure(forest, leaves, next);
    run_exchange_cycle(forest, kPressure, bc);
    ++rep.iterations;
    rep.residual = poisson_residual(forest, rhs);
  }
  rep.converged = rep.residual <= params.poisson_tol;
  return rep;
}

}  // namespace detail

namespace detail {

/// Writes any cell of the hierarchy (interior or face ghost) as a linear
/// combination of leaf unknowns, following exactly what an exchange cycle
/// would put there.
class CompositeAssembler {
 public:
  using Terms = std::vector<Eigen::Triplet<double>>;

  CompositeAssembler(const Forest& forest, const std::array<bool, 6>& dirichlet)
      : forest_(forest), dirichlet_(dirichlet), offset_(forest.size(), -1) {
    for (GridId id : forest.leaves()) {
      offset_[id] = static_cast<std::ptrdiff_t>(unknowns_);
      unknowns_ += static_cast<std::size_t>(forest.node(id).cell_count());
    }
  }

  std::size_t unknowns() const { return unknowns_; }
  std::ptrdiff_t offset(GridId id) const { return offset_[id]; }

  static std::size_t local(const GridNode& g, const Index3& c) {
    return static_cast<std::size_t>(c[0] + g.cells[0] * (c[1] + g.cells[1] * c[2]));
  }

  /// Appends w * value(cell) to `out` as entries of matrix row `row`.
  void cell(GridId id, const Index3& c, double w, int row, Terms& out) const {
    const GridNode& g = forest_.node(id);
    int axis = -1;
    for (int a = 0; a < 3; ++a)
      if (c[a] < 0 || c[a] >= g.cells[a]) axis = a;
    if (axis < 0) {
      if (g.active) {
        out.emplace_back(row, static_cast<int>(offset_[id] + static_cast<std::ptrdiff_t>(local(g, c))), w);
        return;
      }
      const Index3& n = g.subdiv;
      Index3 per{}, child{}, base{};
      for (int a = 0; a < 3; ++a) {
        per[a] = g.cells[a] / n[a];
        child[a] = c[a] / per[a];
        base[a] = (c[a] % per[a]) * n[a];
      }
      const GridId kid = g.child_at(child);
      const double wk = w / static_cast<double>(product(n));
      for (int z = 0; z < n[2]; ++z)
        for (int y = 0; y < n[1]; ++y)
          for (int x = 0; x < n[0]; ++x)
            cell(kid, {base[0] + x, base[1] + y, base[2] + z}, wk, row, out);
      return;
    }
    const Face f = make_face(axis, c[axis] >= 0);
    const auto& topo = forest_.topology();
    if (topo.on_domain_boundary(g.bbox, f)) {
      Index3 in = c;
      in[axis] = face_upper(f) ? g.cells[axis] - 1 : 0;
      cell(id, in, dirichlet_[static_cast<int>(f)] ? -w : w, row, out);
      return;
    }
    if (auto nb = topo.find_neighbor(id, f)) {
      Index3 s = c;
      s[axis] = face_upper(f) ? 0 : g.cells[axis] - 1;
      cell(*nb, s, w, row, out);
      return;
    }
    if (!g.parent) throw SolverError("grid " + std::to_string(id) + " has an unresolvable ghost face");
    const GridNode& parent = forest_.node(*g.parent);
    const Index3& pc = g.path.back();
    Index3 pi;
    for (int a = 0; a < 3; ++a) pi[a] = floor_div(pc[a] * g.cells[a] + c[a], parent.subdiv[a]);
    cell(*g.parent, pi, w, row, out);
  }

 private:
  const Forest& forest_;
  std::array<bool, 6> dirichlet_;
  std::vector<std::ptrdiff_t> offset_;
  std::size_t unknowns_ = 0;
};

}  // namespace detail

/// Sparse LU factorization of the composite leaf Laplacian, reusable while
/// the topology, solid cells and pressure boundary kinds stay the same.
/// Singular (pure Neumann) systems are solved with one pinned row and a
/// constant shift of the right-hand side that makes them consistent.
class DirectPoisson {
 public:
  bool matches(const Forest& forest, const BoundaryModel& bc) const {
    return factored_ && forest_ == &forest && version_ == forest.version() &&
           cell_ops_ == forest.cell_type_ops().size() && dirichlet_ == bc.pressure_dirichlet;
  }

  void factor(const Forest& forest, const BoundaryModel& bc) {
    forest_ = &forest;
    version_ = forest.version();
    cell_ops_ = forest.cell_type_ops().size();
    dirichlet_ = bc.pressure_dirichlet;
    singular_ = bc.singular();
    leaves_ = forest.leaves();
    detail::CompositeAssembler as(forest, dirichlet_);
    const auto n = static_cast<Eigen::Index>(as.unknowns());
    detail::CompositeAssembler::Terms t;
    fluid_.assign(static_cast<std::size_t>(n), 0);
    volume_.assign(static_cast<std::size_t>(n), 0.0);
    pinned_ = -1;
    for (GridId id : leaves_) {
      const GridNode& g = forest.node(id);
      const detail::Stencil st(g, forest.active_axes());
      for (int k = 0; k < g.cells[2]; ++k)
        for (int j = 0; j < g.cells[1]; ++j)
          for (int i = 0; i < g.cells[0]; ++i) {
            const int row = static_cast<int>(as.offset(id) +
                                              static_cast<std::ptrdiff_t>(as.local(g, {i, j, k})));
            const std::size_t c = g.fields.index(i, j, k);
            if (detail::solid_at(g, c)) {
              t.emplace_back(row, row, 1.0);
              continue;
            }
            fluid_[row] = 1;
            volume_[row] = g.cell_volume();
            for (int a = 0; a < 3; ++a) {
              if (!st.axes[a]) continue;
              for (int side : {-1, 1}) {
                if (detail::solid_at(g, c + side * st.s[a])) continue;
                Index3 nb{i, j, k};
                nb[a] += side;
                as.cell(id, nb, st.inv_h2[a], row, t);
                t.emplace_back(row, row, -st.inv_h2[a]);
              }
            }
          }
    }
    a_.resize(n, n);
    a_.setFromTriplets(t.begin(), t.end());
    Eigen::SparseMatrix<double> m = a_;
    if (singular_) {
      for (Eigen::Index r = 0; r < n && pinned_ < 0; ++r)
        if (fluid_[r]) pinned_ = r;
      if (pinned_ >= 0) {
        m = m.transpose();
        for (Eigen::SparseMatrix<double>::InnerIterator it(m, pinned_); it; ++it)
          it.valueRef() = it.row() == pinned_ ? 1.0 : 0.0;
        m = m.transpose();
        m.coeffRef(pinned_, pinned_) = 1.0;
        m.prune(0.0);
      }
    }
    m.makeCompressed();
    lu_.analyzePattern(m);
    lu_.factorize(m);
    if (lu_.info() != Eigen::Success)
      throw SolverError("pressure matrix factorization failed (isolated fluid region?)");
    if (singular_ && pinned_ >= 0) {
      Eigen::VectorXd ones(n);
      for (Eigen::Index r = 0; r < n; ++r) ones[r] = fluid_[r] && r != pinned_ ? 1.0 : 0.0;
      shift_response_ = lu_.solve(ones);
      a_q_pinned_ = a_.row(pinned_).dot(shift_response_);
    }
    factored_ = true;
  }

  /// Solves for p on the leaves; `rhs` is updated to the consistent
  /// right-hand side actually solved.
  double solve(Forest& forest, LeafField& rhs) const {
    const auto n = a_.rows();
    Eigen::VectorXd b(n);
    auto for_cells = [&](auto&& fn) {
      Eigen::Index r = 0;
      for (std::size_t l = 0; l < leaves_.size(); ++l) {
        const GridNode& g = forest.node(leaves_[l]);
        detail::for_each_interior(g, [&](int, int, int, std::size_t c) { fn(l, c, r++); });
      }
    };
    for_cells([&](std::size_t l, std::size_t c, Eigen::Index r) { b[r] = fluid_[r] ? rhs[l][c] : 0.0; });
    double delta = 0.0;
    Eigen::VectorXd x;
    if (singular_ && pinned_ >= 0) {
      const double b_pin = b[pinned_];
      b[pinned_] = 0.0;
      x = lu_.solve(b);
      const double denom = 1.0 - a_q_pinned_;
      if (std::abs(denom) > 1e-300) {
        delta = (a_.row(pinned_).dot(x) - b_pin) / denom;
        x += delta * shift_response_;
      }
      double sum = 0.0, vol = 0.0;
      for (Eigen::Index r = 0; r < n; ++r)
        if (fluid_[r]) {
          sum += x[r] * volume_[r];
          vol += volume_[r];
        }
      const double mean = vol > 0.0 ? sum / vol : 0.0;
      for (Eigen::Index r = 0; r < n; ++r)
        if (fluid_[r]) x[r] -= mean;
    } else {
      x = lu_.solve(b);
    }
    for_cells([&](std::size_t l, std::size_t c, Eigen::Index r) {
      forest.node(leaves_[l]).fields.raw(Quantity::p)[c] = x[r];
      if (fluid_[r]) rhs[l][c] += delta;
    });
    return delta;
  }

  const Eigen::SparseMatrix<double>& matrix() const { return a_; }

 private:
  bool factored_ = false;
  const Forest* forest_ = nullptr;
  std::uint64_t version_ = 0;
  std::size_t cell_ops_ = 0;
  std::array<bool, 6> dirichlet_{};
  bool singular_ = false;
  std::vector<GridId> leaves_;
  std::vector<std::uint8_t> fluid_;
  std::vector<double> volume_;
  Eigen::SparseMatrix<double> a_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu_;
  Eigen::Index pinned_ = -1;
  Eigen::VectorXd shift_response_;
  double a_q_pinned_ = 0.0;
};

/// Solves the composite-grid pressure equation ∇²p = rhs on the leaves,
/// starting from the current p (iterative methods). For singular problems
/// the right-hand side is made consistent and p held at zero mean.
/// `cache` keeps the direct method's factorization between calls.
inline PoissonReport solve_poisson(Forest& forest, const LeafField& rhs, const FluidParams& params,
                                   const BoundaryModel& bc, DirectPoisson* cache = nullptr) {
  const bool singular = bc.singular();
  switch (params.poisson_method) {
    case PoissonMethod::jacobi: {
      if (!singular) return detail::jacobi_solve(forest, rhs, params, bc.fill, singular);
      LeafField centred = rhs;
      detail::subtract_mean(forest, forest.leaves(), centred);
      return detail::jacobi_solve(forest, centred, params, bc.fill, singular);
    }
    case PoissonMethod::direct: {
      DirectPoisson local;
      DirectPoisson& dp = cache ? *cache : local;
      if (!dp.matches(forest, bc)) dp.factor(forest, bc);
      LeafField consistent = rhs;
      PoissonReport rep;
      rep.compatibility_shift = dp.solve(forest, consistent);
      run_exchange_cycle(forest, kPressure, bc.fill);
      rep.iterations = 1;
      rep.residual = poisson_residual(forest, consistent);
      rep.converged = rep.residual <= params.poisson_tol;
      return rep;
    }
  }
  return {};
}

inline PoissonReport solve_pressure_poisson(Forest& forest, const FluidParams& params, double dt,
                                            const BoundaryModel& bc, DirectPoisson* cache = nullptr) {
  return solve_poisson(forest, pressure_rhs(forest, params, dt), params, bc, cache);
}

/// u = u* − (dt/ρ) ∇p with the central pressure gradient; a solid
/// neighbour contributes the cell's own pressure.
inline void correct_velocity(GridNode& g, const FluidParams& params, double dt,
                             const AxisSet& axes = {true, true, true}) {
  const detail::Stencil st(g, axes);
  const double* p = g.fields.raw(Quantity::p).data();
  for (int comp = 0; comp < 3; ++comp) {
    double* u = g.fields.raw(velocity_component(comp)).data();
    const double* us = g.fields.raw(starred_component(comp)).data();
    detail::for_each_interior(g, [&](int, int, int, std::size_t c) {
      if (detail::solid_at(g, c)) {
        u[c] = 0.0;
        return;
      }
      if (!axes[comp]) {
        u[c] = us[c];
        return;
      }
      const auto s = st.s[comp];
      const double hi = detail::solid_at(g, c + s) ? p[c] : p[c + s];
      const double lo = detail::solid_at(g, c - s) ? p[c] : p[c - s];
      u[c] = us[c] - dt / params.rho * (hi - lo) * 0.5 * st.inv_h[comp];
    });
  }
}

/// Max |divergence| of the projected face velocities
/// u_f = avg(u*) − (dt/ρ)(p_n − p_c)/h, the fluxes the pressure equation
/// makes divergence-free (the compact-stencil pressure term is what damps
/// collocated checkerboard modes).
inline double max_face_divergence(const Forest& forest, const FluidParams& params, double dt) {
  const auto& axes = forest.active_axes();
  double m = 0.0;
  for (GridId id : forest.leaves()) {
    const GridNode& g = forest.node(id);
    const detail::Stencil st(g, axes);
    const double* p = g.fields.raw(Quantity::p).data();
    detail::for_each_interior(g, [&](int, int, int, std::size_t c) {
      if (detail::solid_at(g, c)) return;
      double div = 0.0;
      for (int a = 0; a < 3; ++a) {
        if (!axes[a]) continue;
        const double* us = g.fields.raw(starred_component(a)).data();
        const auto s = st.s[a];
        const double k = dt / params.rho * st.inv_h[a];
        const double fp =
            detail::solid_at(g, c + s) ? 0.0 : 0.5 * (us[c] + us[c + s]) - k * (p[c + s] - p[c]);
        const double fm =
            detail::solid_at(g, c - s) ? 0.0 : 0.5 * (us[c] + us[c - s]) - k * (p[c] - p[c - s]);
        div += (fp - fm) * st.inv_h[a];
      }
      m = std::max(m, std::abs(div));
    });
  }
  return m;
}

/// cfl · min over leaves of min(h/|u|max, h²/(2dν)), d the number of active axes.
inline double stable_dt(const Forest& forest, const FluidParams& params) {
  const auto& axes = forest.active_axes();
  const int dims = std::max(1, axis_count(axes));
  double dt = std::numeric_limits<double>::infinity();
  for (GridId id : forest.leaves()) {
    const GridNode& g = forest.node(id);
    const auto hw = g.cell_width();
    double h = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a)
      if (axes[a]) h = std::min(h, hw[a]);
    double umax = 0.0;
    detail::for_each_interior(g, [&](int, int, int, std::size_t c) {
      double s = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double v = g.fields.raw(velocity_component(a))[c];
        s += v * v;
      }
      umax = std::max(umax, std::sqrt(s));
    });
    if (umax > 0.0) dt = std::min(dt, h / umax);
    if (params.nu > 0.0) dt = std::min(dt, h * h / (2.0 * dims * params.nu));
  }
  return std::isfinite(dt) ? params.cfl * dt : params.dt;
}

struct StepReport {
  double dt = 0.0;
  double max_div = 0.0;
  int poisson_iterations = 0;
  double residual = 0.0;
  bool converged = true;
};

/// One fractional step on every leaf: exchange, predictor, pressure solve,
/// correction, exchange.
inline StepReport step(Forest& forest, const FluidParams& params, const BoundaryModel& bc,
                       DirectPoisson* cache = nullptr) {
  StepReport rep;
  run_exchange_cycle(forest, kFlow, bc.fill);
  rep.dt = params.adaptive_dt ? stable_dt(forest, params) : params.dt;
  compute_intermediate_velocity(forest, params, rep.dt, bc.fill);
  const auto pr = solve_pressure_poisson(forest, params, rep.dt, bc, cache);
  rep.poisson_iterations = pr.iterations;
  rep.residual = pr.residual;
  rep.converged = pr.converged;
  for (GridId id : forest.leaves()) correct_velocity(forest.node(id), params, rep.dt, forest.active_axes());
  rep.max_div = max_face_divergence(forest, params, rep.dt);
  for (GridId id : forest.leaves())
    for (int a = 0; a < 3; ++a) detail::check_finite(forest.node(id), velocity_component(a));
  run_exchange_cycle(forest, kFlow, bc.fill);
  return rep;
}

inline StepReport step(Forest& forest, const FluidParams& params, const BoundarySpec& bc,
                       DirectPoisson* cache = nullptr) {
  return step(forest, params, make_boundary_model(bc, forest.active_axes()), cache);
}

/// Per-step CSV log: t, dt, max|div u|, Poisson iterations, residual.
class MetricsLog {
 public:
  explicit MetricsLog(std::ostream& os) : os_(os) {
    os_ << "t,dt,max_div,poisson_iterations,residual\n";
  }
  void record(double t, const StepReport& r) {
    os_.precision(12);
    os_ << t << ',' << r.dt << ',' << r.max_div << ',' << r.poisson_iterations << ','
        << r.residual << '\n';
  }

 private:
  std::ostream& os_;
};

}  // namespace slwin

#endif
