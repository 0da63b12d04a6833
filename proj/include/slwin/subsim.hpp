#ifndef SLWIN_SUBSIM_HPP
#define SLWIN_SUBSIM_HPP

#include <cmath>
#include <memory>

#include "solver.hpp"

namespace slwin {

/// Value of `q` in the leaf cell containing `p`. Points up to half a cell
/// beyond a domain wall read the wall ghost of the mirrored interior cell,
/// so boundary conditions carry into interpolation.
inline double point_value(const Forest& forest, const Vec3& p, Quantity q) {
  const Box& d = forest.domain();
  Vec3 in = p;
  int wall_axis = -1;
  for (int a = 0; a < 3; ++a)
    if (in[a] < d.lo[a] || in[a] > d.hi[a]) {
      if (wall_axis < 0) wall_axis = a;
      in[a] = std::clamp(2.0 * (in[a] < d.lo[a] ? d.lo[a] : d.hi[a]) - in[a], d.lo[a], d.hi[a]);
    }
  const auto id = forest.find_leaf(in);
  if (!id) throw Error("point outside the domain");
  const GridNode& g = forest.node(*id);
  const Vec3 h = g.cell_width();
  Index3 c;
  for (int a = 0; a < 3; ++a)
    c[a] = std::clamp(static_cast<int>(std::floor((in[a] - g.bbox.lo[a]) / h[a])), 0, g.cells[a] - 1);
  if (wall_axis >= 0) c[wall_axis] = p[wall_axis] < d.lo[wall_axis] ? -1 : g.cells[wall_axis];
  return g.fields(q, c[0], c[1], c[2]);
}

/// Multilinear interpolation of the cell-centred field `q` at `x`, over the
/// active axes, with stencil spacing taken from the leaf containing `x`.
inline double interpolate(const Forest& forest, const Vec3& x, Quantity q) {
  const auto id = forest.find_leaf(x);
  if (!id) throw Error("interpolation point outside the domain");
  const GridNode& g = forest.node(*id);
  const Vec3 h = g.cell_width();
  const auto& axes = forest.active_axes();
  Vec3 base{}, frac{};
  for (int a = 0; a < 3; ++a) {
    if (!axes[a]) {
      base[a] = x[a];
      continue;
    }
    const double s = (x[a] - g.bbox.lo[a]) / h[a] - 0.5;
    const double i = std::floor(s);
    frac[a] = s - i;
    base[a] = g.bbox.lo[a] + (i + 0.5) * h[a];
  }
  double acc = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    double w = 1.0;
    Vec3 pt = base;
    bool skip = false;
    for (int a = 0; a < 3; ++a) {
      const int bit = (corner >> a) & 1;
      if (!axes[a]) {
        if (bit) skip = true;
        continue;
      }
      w *= bit ? frac[a] : 1.0 - frac[a];
      pt[a] += bit * h[a];
    }
    if (skip || w == 0.0) continue;
    acc += w * point_value(forest, pt, q);
  }
  return acc;
}

/// A finer re-computation of a window of the main simulation. Its faces on
/// the domain boundary keep the main boundary conditions; the other faces
/// take velocity ghosts interpolated from the main (coarse) state after
/// every coarse step, with zero-gradient pressure.
class SubSimulation {
 public:
  SubSimulation(std::uint32_t id, const Forest& coarse, const Box& request, int depth,
                const BoundarySpec& bc)
      : id_(id), depth_(depth), bc_(bc) {
    if (depth < 0 || depth > 4) throw Error("sub-simulation depth must lie in [0, 4]");
    const Box& d = coarse.domain();
    const double tol = coarse.topology().tolerance();
    const auto& axes = coarse.active_axes();
    for (int a = 0; a < 3; ++a) {
      if (request.lo[a] < d.lo[a] - tol || request.hi[a] > d.hi[a] + tol)
        throw Error("sub-simulation box lies outside the domain");
      if (axes[a] && !(request.hi[a] > request.lo[a]))
        throw Error(std::string("sub-simulation box is flat along ") + axis_name(a));
    }
    // Snap outward to the finest coarse lattice among the leaves it covers.
    Vec3 hc{d.extent(0), d.extent(1), d.extent(2)};
    for (GridId lid : coarse.leaves()) {
      const GridNode& g = coarse.node(lid);
      if (intersects_positive(g.bbox, request, axes)) {
        const Vec3 w = g.cell_width();
        for (int a = 0; a < 3; ++a) hc[a] = std::min(hc[a], w[a]);
      }
    }
    Box b = d;
    Index3 cells{1, 1, 1};
    for (int a = 0; a < 3; ++a) {
      if (!axes[a]) continue;
      const double i0 = std::floor((request.lo[a] - d.lo[a]) / hc[a] + 1e-9);
      const double i1 = std::ceil((request.hi[a] - d.lo[a]) / hc[a] - 1e-9);
      b.lo[a] = i0 == 0 ? d.lo[a] : d.lo[a] + i0 * hc[a];
      b.hi[a] = std::abs(d.lo[a] + i1 * hc[a] - d.hi[a]) <= tol ? d.hi[a] : d.lo[a] + i1 * hc[a];
      cells[a] = static_cast<int>(i1 - i0) << depth;
    }
    GridLayout layout;
    layout.domain = b;
    layout.cells = cells;
    layout.max_depth = 0;
    forest_ = Forest(layout);
    // Active axes follow the coarse run even when the window spans one cell.
    for (Face f : kAllFaces) {
      const int a = face_axis(f);
      coupled_[static_cast<int>(f)] =
          axes[a] && !(face_upper(f) ? std::abs(b.hi[a] - d.hi[a]) <= tol
                                     : std::abs(b.lo[a] - d.lo[a]) <= tol);
    }
    ghosts_ = std::make_shared<GhostStore>();
    model_.fill = [bc = bc_, axes, coupled = coupled_, store = ghosts_](
                      GridNode& g, Face f, const QuantityMask& mask) {
      const int fi = static_cast<int>(f);
      if (!coupled[fi]) {
        apply_wall(g, f, mask, bc[f], axes);
        return;
      }
      const auto& vals = store->values[fi];
      for (int qi = 0; qi < kQuantityCount; ++qi) {
        if (!mask.test(qi)) continue;
        const auto q = static_cast<Quantity>(qi);
        double* dst = g.fields.raw(q).data();
        if (q == Quantity::p) {
          for_each_face_index(g.fields, f, [dst](std::size_t gh, std::size_t in) { dst[gh] = dst[in]; });
          continue;
        }
        const int comp = component_axis(q);
        std::size_t n = 0;
        for_each_face_index(g.fields, f, [&](std::size_t gh, std::size_t) {
          dst[gh] = vals[3 * n + comp];
          ++n;
        });
      }
    };
    for (Face f : kAllFaces)
      model_.pressure_dirichlet[static_cast<int>(f)] =
          !coupled_[static_cast<int>(f)] && axes[face_axis(f)] && bc_[f].kind == WallKind::outflow;

    GridNode& g = forest_.node(0);
    for (int k = 0; k < g.cells[2]; ++k)
      for (int j = 0; j < g.cells[1]; ++j)
        for (int i = 0; i < g.cells[0]; ++i) {
          const Vec3 x = g.cell_center(i, j, k);
          for (Quantity q : {Quantity::u, Quantity::v, Quantity::w, Quantity::p})
            g.fields(q, i, j, k) = interpolate(coarse, x, q);
        }
    couple(coarse);
    run_exchange_cycle(forest_, kFlow, model_.fill);
  }

  std::uint32_t id() const { return id_; }
  int depth() const { return depth_; }
  const Box& bbox() const { return forest_.domain(); }
  const Forest& forest() const { return forest_; }
  Forest& forest() { return forest_; }
  const BoundaryModel& boundary() const { return model_; }
  bool coupled(Face f) const { return coupled_[static_cast<int>(f)]; }
  double time() const { return time_; }
  std::uint64_t steps() const { return steps_; }
  const StepReport& last_report() const { return last_; }

  /// Ghost-cell centres of a coupled face, in the order their values are stored.
  std::vector<Vec3> ghost_centers(Face f) const {
    const GridNode& g = forest_.node(0);
    std::vector<Vec3> out;
    for_each_face_cell(g.cells, f, [&](const Index3& gh, const Index3&) {
      out.push_back(g.cell_center(gh[0], gh[1], gh[2]));
    });
    return out;
  }

  /// Refreshes the coupled ghost values from the coarse state.
  void couple(const Forest& coarse) {
    for (Face f : kAllFaces) {
      const int fi = static_cast<int>(f);
      auto& vals = ghosts_->values[fi];
      vals.clear();
      if (!coupled_[fi]) continue;
      for (const Vec3& x : ghost_centers(f))
        for (Quantity q : {Quantity::u, Quantity::v, Quantity::w})
          vals.push_back(interpolate(coarse, x, q));
    }
  }

  /// Covers one coarse step of length `dt` with at least 2^depth substeps
  /// (more if the finer cells need it for stability).
  void advance(double dt, FluidParams params) {
    params.adaptive_dt = false;
    int n = 1 << depth_;
    FluidParams bound = params;
    bound.cfl = 1.0;
    const double limit = stable_dt(forest_, bound);
    if (limit > 0.0 && dt / n > limit) n = static_cast<int>(std::ceil(dt / limit));
    params.dt = dt / n;
    for (int s = 0; s < n; ++s) {
      last_ = step(forest_, params, model_, &poisson_);
      time_ += params.dt;
    }
    ++steps_;
  }

 private:
  struct GhostStore {
    std::array<std::vector<double>, 6> values;
  };

  static bool intersects_positive(const Box& a, const Box& b, const AxisSet& axes) {
    for (int i = 0; i < 3; ++i)
      if (axes[i] && !(std::min(a.hi[i], b.hi[i]) > std::max(a.lo[i], b.lo[i]))) return false;
    return true;
  }

  std::uint32_t id_;
  int depth_;
  BoundarySpec bc_;
  Forest forest_;
  std::array<bool, 6> coupled_{};
  std::shared_ptr<GhostStore> ghosts_;
  BoundaryModel model_;
  DirectPoisson poisson_;
  double time_ = 0.0;
  std::uint64_t steps_ = 0;
  StepReport last_;
};

}  // namespace slwin

#endif
