#ifndef SLWIN_EXCHANGE_HPP
#define SLWIN_EXCHANGE_HPP

#include <functional>
#include <span>
#include <vector>

#include "hiergrid.hpp"

namespace slwin {

class ExchangeError : public Error {
 public:
  using Error::Error;
};

/// Fills the physical ghost face `f` of a grid for the quantities in the mask.
using PhysicalBoundary = std::function<void(GridNode&, Face, const QuantityMask&)>;

/// Calls fn(ghost, interior) with the index triples of every ghost cell on
/// face `f` (edges and corners excluded) and the interior cell it borders.
template <class Fn>
void for_each_face_cell(const Index3& cells, Face f, Fn&& fn) {
  const int axis = face_axis(f);
  const int t1 = (axis + 1) % 3;
  const int t2 = (axis + 2) % 3;
  const int ghost = face_upper(f) ? cells[axis] : -1;
  const int inner = face_upper(f) ? cells[axis] - 1 : 0;
  Index3 g{}, in{};
  for (int b = 0; b < cells[t2]; ++b)
    for (int a = 0; a < cells[t1]; ++a) {
      g[axis] = ghost;
      in[axis] = inner;
      g[t1] = in[t1] = a;
      g[t2] = in[t2] = b;
      fn(g, in);
    }
}

/// Like for_each_face_cell, but passes linear FieldSet indices.
template <class Fn>
void for_each_face_index(const FieldSet& fs, Face f, Fn&& fn) {
  const Index3& cells = fs.cells();
  const int axis = face_axis(f);
  const int t1 = (axis + 1) % 3;
  const int t2 = (axis + 2) % 3;
  Index3 base{0, 0, 0};
  base[axis] = face_upper(f) ? cells[axis] : -1;
  const std::size_t g0 = fs.index(base[0], base[1], base[2]);
  const std::size_t s1 = fs.stride(t1), s2 = fs.stride(t2);
  const std::size_t sa = fs.stride(axis);
  for (int b = 0; b < cells[t2]; ++b)
    for (int a = 0; a < cells[t1]; ++a) {
      const std::size_t gh = g0 + static_cast<std::size_t>(a) * s1 + static_cast<std::size_t>(b) * s2;
      fn(gh, face_upper(f) ? gh - sa : gh + sa);
    }
}

inline void zero_gradient_boundary(GridNode& g, Face f, const QuantityMask& mask) {
  for (int q = 0; q < kQuantityCount; ++q) {
    if (!mask.test(q)) continue;
    double* d = g.fields.raw(static_cast<Quantity>(q)).data();
    for_each_face_index(g.fields, f, [d](std::size_t gh, std::size_t in) { d[gh] = d[in]; });
  }
}

/// Averages child cells into the parent cells that contain them.
inline void restrict_up(GridNode& parent, std::span<const GridNode* const> children,
                        const QuantityMask& mask) {
  const Index3& n = parent.subdiv;
  if (children.size() != static_cast<std::size_t>(product(n)) || parent.children.empty())
    throw ExchangeError("grid " + std::to_string(parent.id) + ": child count does not match " +
                        "its subdivision");
  const Index3& nc = parent.cells;
  for (const GridNode* c : children)
    if (c->cells != nc || !c->fields.same_shape(parent.fields) || parent.fields.cells() != nc)
      throw ExchangeError("grid " + std::to_string(parent.id) + ": child shape mismatch");
  const double inv = 1.0 / static_cast<double>(product(n));
  Index3 per{nc[0] / n[0], nc[1] / n[1], nc[2] / n[2]};
  for (int cz = 0; cz < n[2]; ++cz)
    for (int cy = 0; cy < n[1]; ++cy)
      for (int cx = 0; cx < n[0]; ++cx) {
        const GridNode& child =
            *children[static_cast<std::size_t>(cx + n[0] * (cy + n[1] * cz))];
        for (int q = 0; q < kQuantityCount; ++q) {
          if (!mask.test(q)) continue;
          const auto qq = static_cast<Quantity>(q);
          for (int K = 0; K < per[2]; ++K)
            for (int J = 0; J < per[1]; ++J)
              for (int I = 0; I < per[0]; ++I) {
                // Deviations from the first child keep constants exact.
                const double base = child.fields(qq, I * n[0], J * n[1], K * n[2]);
                double sum = 0.0;
                for (int c = 0; c < n[2]; ++c)
                  for (int b = 0; b < n[1]; ++b)
                    for (int a = 0; a < n[0]; ++a)
                      sum += child.fields(qq, I * n[0] + a, J * n[1] + b, K * n[2] + c) - base;
                parent.fields(qq, cx * per[0] + I, cy * per[1] + J, cz * per[2] + K) =
                    base + sum * inv;
              }
        }
      }
}

inline void restrict_up(Forest& forest, GridId parent_id, const QuantityMask& mask) {
  GridNode& parent = forest.node(parent_id);
  std::vector<const GridNode*> kids;
  kids.reserve(parent.children.size());
  for (GridId c : parent.children) kids.push_back(&forest.node(c));
  restrict_up(parent, kids, mask);
}

/// Marks every ghost face either physical (domain boundary) or unfilled.
inline void reset_halo_state(Forest& forest) {
  const auto& topo = forest.topology();
  for (auto& g : forest.nodes())
    for (Face f : kAllFaces)
      g.halo[static_cast<int>(f)] =
          topo.on_domain_boundary(g.bbox, f) ? FaceFill::physical : FaceFill::unfilled;
}

/// Copies interior face layers into the ghost layers of same-level
/// neighbours, for every grid (active or not). Returns the number of faces
/// filled.
inline int exchange_horizontal(Forest& forest, const QuantityMask& mask) {
  const auto& topo = forest.topology();
  int filled = 0;
  for (auto& g : forest.nodes()) {
    for (Face f : kAllFaces) {
      if (g.halo[static_cast<int>(f)] == FaceFill::physical) continue;
      auto nb = topo.find_neighbor(g.id, f);
      if (!nb) continue;
      const GridNode& src = forest.node(*nb);
      if (!src.fields.same_shape(g.fields))
        throw ExchangeError("grids " + std::to_string(g.id) + " and " + std::to_string(src.id) +
                            " differ in shape");
      const int axis = face_axis(f);
      // Ghost layer of g and the opposite boundary layer of src differ by a
      // fixed linear offset (same shape).
      const auto shift = static_cast<std::ptrdiff_t>(src.fields.stride(axis)) *
                         (face_upper(f) ? -src.cells[axis] : src.cells[axis]);
      for (int q = 0; q < kQuantityCount; ++q) {
        if (!mask.test(q)) continue;
        const auto qq = static_cast<Quantity>(q);
        double* d = g.fields.raw(qq).data();
        const double* sv = src.fields.raw(qq).data();
        for_each_face_index(g.fields, f, [&](std::size_t gh, std::size_t) {
          d[gh] = sv[static_cast<std::ptrdiff_t>(gh) + shift];
        });
      }
      g.halo[static_cast<int>(f)] = FaceFill::same_level;
      ++filled;
    }
  }
  return filled;
}

/// Fills the still-unfilled ghost faces of `child_id` from the overlapping
/// parent cells (parent ghosts included, which must already be filled).
/// Roots have no parent: their unfilled faces go to `physical`.
inline int fill_topdown(Forest& forest, GridId child_id, const QuantityMask& mask,
                        const PhysicalBoundary& physical = zero_gradient_boundary) {
  GridNode& child = forest.node(child_id);
  int filled = 0;
  if (!child.parent) {
    for (Face f : kAllFaces) {
      auto& st = child.halo[static_cast<int>(f)];
      if (st != FaceFill::unfilled) continue;
      physical(child, f, mask);
      st = FaceFill::physical;
    }
    return 0;
  }
  const GridNode& parent = forest.node(*child.parent);
  const Index3& n = parent.subdiv;
  const Index3& c = child.path.back();
  const Index3& nc = child.cells;
  for (Face f : kAllFaces) {
    auto& st = child.halo[static_cast<int>(f)];
    if (st != FaceFill::unfilled) continue;
    for_each_face_cell(nc, f, [&](const Index3& gh, const Index3&) {
      const int pi = floor_div(c[0] * nc[0] + gh[0], n[0]);
      const int pj = floor_div(c[1] * nc[1] + gh[1], n[1]);
      const int pk = floor_div(c[2] * nc[2] + gh[2], n[2]);
      for (int q = 0; q < kQuantityCount; ++q) {
        if (!mask.test(q)) continue;
        const auto qq = static_cast<Quantity>(q);
        child.fields(qq, gh[0], gh[1], gh[2]) = parent.fields(qq, pi, pj, pk);
      }
    });
    st = FaceFill::parent;
    ++filled;
  }
  return filled;
}

inline void apply_physical_boundaries(Forest& forest, const QuantityMask& mask,
                                      const PhysicalBoundary& physical) {
  for (auto& g : forest.nodes())
    for (Face f : kAllFaces)
      if (g.halo[static_cast<int>(f)] == FaceFill::physical) physical(g, f, mask);
}

struct CycleReport {
  int restricted = 0;
  int same_level_faces = 0;
  int parent_faces = 0;
};

/// Restriction bottom-up, same-level halo exchange, then top-down halo fill
/// root to leaf, then physical boundaries. Each phase completes before the
/// next one starts.
inline CycleReport run_exchange_cycle(Forest& forest, const QuantityMask& mask,
                                      const PhysicalBoundary& physical = zero_gradient_boundary) {
  CycleReport r;
  const auto& topo = forest.topology();
  reset_halo_state(forest);
  for (int l = topo.depth() - 2; l >= 0; --l)
    for (GridId id : topo.level(l))
      if (!forest.node(id).active) {
        restrict_up(forest, id, mask);
        ++r.restricted;
      }
  r.same_level_faces = exchange_horizontal(forest, mask);
  for (int l = 0; l < topo.depth(); ++l)
    for (GridId id : topo.level(l)) r.parent_faces += fill_topdown(forest, id, mask, physical);
  apply_physical_boundaries(forest, mask, physical);
  return r;
}

}  // namespace slwin

#endif
