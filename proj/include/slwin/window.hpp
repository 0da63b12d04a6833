#ifndef SLWIN_WINDOW_HPP
#define SLWIN_WINDOW_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "hiergrid.hpp"

namespace slwin {

class StaleSelection : public Error {
 public:
  using Error::Error;
};

enum class StreamQuantity : std::uint8_t { velocity = 0, pressure = 1, velocity_magnitude = 2 };

inline int arity(StreamQuantity q) { return q == StreamQuantity::velocity ? 3 : 1; }

inline const char* quantity_name(StreamQuantity q) {
  switch (q) {
    case StreamQuantity::velocity: return "velocity";
    case StreamQuantity::pressure: return "pressure";
    case StreamQuantity::velocity_magnitude: return "velocity_magnitude";
  }
  return "?";
}

inline StreamQuantity parse_quantity(const std::string& s) {
  if (s == "velocity") return StreamQuantity::velocity;
  if (s == "pressure") return StreamQuantity::pressure;
  if (s == "velocity_magnitude" || s == "magnitude") return StreamQuantity::velocity_magnitude;
  throw Error("unknown quantity '" + s + "'");
}

struct WindowQuery {
  Box bbox;
  std::uint32_t max_cells = 400;
  StreamQuantity quantity = StreamQuantity::pressure;
};

enum class Overlap { outside, touches, inside };

/// Per-axis closed-interval test; `inside` when the grid lies entirely
/// within the window, `touches` for any other contact, shared corners
/// included.
inline Overlap intersects(const Box& grid, const Box& window) {
  bool inside = true;
  for (int a = 0; a < 3; ++a) {
    if (grid.hi[a] < window.lo[a] || grid.lo[a] > window.hi[a]) return Overlap::outside;
    if (grid.lo[a] < window.lo[a] || grid.hi[a] > window.hi[a]) inside = false;
  }
  return inside ? Overlap::inside : Overlap::touches;
}

struct SelectedGrid {
  GridId id = 0;
  int level = 0;
  int owner = 0;
  /// Half-open interior cell ranges [lo, hi) intersecting the window.
  Index3 lo{0, 0, 0};
  Index3 hi{0, 0, 0};
  /// Cells are merged into stride^d blocks (aligned to the grid origin);
  /// 1 except when even the roots exceed the budget.
  int stride = 1;

  long long blocks(int axis) const {
    return hi[axis] <= lo[axis] ? 0 : (hi[axis] - 1) / stride - lo[axis] / stride + 1;
  }
  long long cell_count() const { return blocks(0) * blocks(1) * blocks(2); }

  friend bool operator==(const SelectedGrid&, const SelectedGrid&) = default;
};

struct Selection {
  Box window;
  std::vector<SelectedGrid> grids;
  long long total_cells = 0;
  std::uint64_t version = 0;
  /// True only when the budget is below the number of root grids touched,
  /// so part of the window had to be left out.
  bool truncated = false;

  nlohmann::json to_json() const {
    nlohmann::json g = nlohmann::json::array();
    for (const auto& s : grids)
      g.push_back({{"id", s.id},
                   {"level", s.level},
                   {"owner", s.owner},
                   {"lo", s.lo},
                   {"hi", s.hi},
                   {"stride", s.stride},
                   {"cells", s.cell_count()}});
    return {{"window", {{"lo", window.lo}, {"hi", window.hi}}},
            {"version", version},
            {"total_cells", total_cells},
            {"truncated", truncated},
            {"grids", std::move(g)}};
  }
};

namespace detail {

/// Cells of `e` clipped to the window: those overlapping it with positive
/// length on each axis, or the single containing cell on axes where the
/// window is flat.
inline bool clip_cells(const TopologyEntry& e, const Box& w, const Box& domain, Index3& lo,
                       Index3& hi) {
  for (int a = 0; a < 3; ++a) {
    const int n = e.cells[a];
    const double x0 = e.bbox.lo[a], ext = e.bbox.extent(a), h = ext / n;
    // Same edge arithmetic as GridNode::cell_box.
    auto edge = [&](int i) { return i == n ? e.bbox.hi[a] : x0 + i * h; };
    const double a0 = std::max(w.lo[a], e.bbox.lo[a]);
    const double a1 = std::min(w.hi[a], e.bbox.hi[a]);
    if (a1 < a0) return false;
    if (w.lo[a] == w.hi[a]) {
      // A flat window plane on a shared face belongs to the upper grid.
      if (a0 == e.bbox.hi[a] && e.bbox.hi[a] < domain.hi[a]) return false;
      int i = static_cast<int>(std::floor((a0 - x0) / ext * n));
      i = std::clamp(i, 0, n - 1);
      while (i > 0 && edge(i) > a0) --i;
      while (i + 1 < n && edge(i + 1) <= a0) ++i;
      lo[a] = i;
      hi[a] = i + 1;
      continue;
    }
    if (a1 == a0) return false;
    int i0 = std::clamp(static_cast<int>(std::floor((a0 - x0) / ext * n)), 0, n - 1);
    while (i0 > 0 && edge(i0) > a0) --i0;
    while (i0 + 1 < n && edge(i0 + 1) <= a0) ++i0;
    int i1 = std::clamp(static_cast<int>(std::ceil((a1 - x0) / ext * n)), 1, n);
    while (i1 < n && edge(i1) < a1) ++i1;
    while (i1 > 1 && edge(i1 - 1) >= a1) --i1;
    lo[a] = i0;
    hi[a] = i1;
  }
  return true;
}

inline bool candidate(const TopologyEntry& e, const Box& w, const Box& domain, SelectedGrid& out) {
  if (intersects(e.bbox, w) == Overlap::outside) return false;
  out.id = e.id;
  out.level = e.level;
  out.owner = e.owner;
  out.stride = 1;
  return clip_cells(e, w, domain, out.lo, out.hi) && out.cell_count() > 0;
}

}  // namespace detail

/// Budgeted coarse-to-fine selection. Starting from the root grids touching
/// the window, each selected grid is visited level by level in Morton order
/// and replaced by its touching children whenever the new total stays
/// within the budget. Grids whose clipped range holds no cells are dropped.
inline Selection select(const TopologyIndex& topo, const WindowQuery& q) {
  if (q.max_cells < 1) throw Error("max_cells must be >= 1");
  for (int a = 0; a < 3; ++a)
    if (!(q.bbox.lo[a] <= q.bbox.hi[a])) throw Error("window box is inverted or not finite");
  Selection sel;
  sel.window = q.bbox;
  sel.version = topo.version();
  const long long budget = q.max_cells;

  std::vector<std::vector<SelectedGrid>> by_level(1);
  long long total = 0;
  for (GridId id : topo.level(0)) {
    SelectedGrid s;
    if (detail::candidate(topo.at(id), q.bbox, topo.domain(), s)) {
      total += s.cell_count();
      by_level[0].push_back(s);
    }
  }

  if (total > budget) {
    // Even the roots do not fit: merge root cells into coarser blocks.
    auto& roots = by_level[0];
    int max_cells = 1;
    for (const auto& s : roots)
      for (int a = 0; a < 3; ++a) max_cells = std::max(max_cells, topo.at(s.id).cells[a]);
    for (int stride = 2; stride <= max_cells && total > budget; ++stride) {
      total = 0;
      for (auto& s : roots) {
        s.stride = stride;
        total += s.cell_count();
      }
    }
    if (total > budget) {
      roots.resize(static_cast<std::size_t>(budget));
      sel.truncated = true;
      total = 0;
      for (const auto& s : roots) total += s.cell_count();
    }
    sel.grids = roots;
    sel.total_cells = total;
    return sel;
  }

  for (std::size_t l = 0; l < by_level.size(); ++l) {
    std::vector<SelectedGrid> next;
    std::vector<SelectedGrid> kept;
    for (const auto& s : by_level[l]) {
      const auto& e = topo.at(s.id);
      if (e.children.empty()) {
        kept.push_back(s);
        continue;
      }
      std::vector<SelectedGrid> kids;
      long long add = 0;
      for (GridId c : e.children) {
        SelectedGrid k;
        if (detail::candidate(topo.at(c), q.bbox, topo.domain(), k)) {
          add += k.cell_count();
          kids.push_back(k);
        }
      }
      if (total - s.cell_count() + add <= budget) {
        total += add - s.cell_count();
        next.insert(next.end(), kids.begin(), kids.end());
      } else {
        kept.push_back(s);
      }
    }
    by_level[l] = std::move(kept);
    if (!next.empty()) {
      std::sort(next.begin(), next.end(), [&](const SelectedGrid& a, const SelectedGrid& b) {
        return topo.at(a.id).key < topo.at(b.id).key;
      });
      by_level.push_back(std::move(next));
    }
  }
  for (auto& lv : by_level) sel.grids.insert(sel.grids.end(), lv.begin(), lv.end());
  sel.total_cells = total;
  return sel;
}

inline Selection select(const Forest& forest, const WindowQuery& q) {
  return select(forest.topology(), q);
}

struct StreamCell {
  Vec3 center{};
  Vec3 width{};
  std::uint8_t level = 0;
  std::array<double, 3> values{};

  friend bool operator==(const StreamCell&, const StreamCell&) = default;
};

/// One selection's worth of cell data, as sent to clients.
struct CellStream {
  StreamQuantity quantity = StreamQuantity::pressure;
  std::uint64_t version = 0;
  double time = 0.0;
  std::uint64_t step = 0;
  std::vector<StreamCell> cells;

  int arity() const { return slwin::arity(quantity); }
  friend bool operator==(const CellStream&, const CellStream&) = default;
};

namespace detail {

inline std::array<double, 3> cell_value(const GridNode& g, StreamQuantity q, int i, int j, int k) {
  switch (q) {
    case StreamQuantity::velocity:
      return {g.fields(Quantity::u, i, j, k), g.fields(Quantity::v, i, j, k),
              g.fields(Quantity::w, i, j, k)};
    case StreamQuantity::pressure: return {g.fields(Quantity::p, i, j, k), 0.0, 0.0};
    case StreamQuantity::velocity_magnitude: {
      const double u = g.fields(Quantity::u, i, j, k), v = g.fields(Quantity::v, i, j, k),
                   w = g.fields(Quantity::w, i, j, k);
      return {std::sqrt(u * u + v * v + w * w), 0.0, 0.0};
    }
  }
  return {};
}

}  // namespace detail

/// Reads the selected cells out of the grids' stored arrays: restricted
/// values on inactive grids, computed values on leaves. Merged blocks carry
/// the mean over their cells.
inline CellStream extract(const Forest& forest, const Selection& sel, StreamQuantity q,
                          double time = 0.0, std::uint64_t step = 0) {
  if (sel.version != forest.version())
    throw StaleSelection("selection was made against topology version " +
                         std::to_string(sel.version) + ", forest is at " +
                         std::to_string(forest.version()));
  CellStream cs;
  cs.quantity = q;
  cs.version = sel.version;
  cs.time = time;
  cs.step = step;
  cs.cells.reserve(static_cast<std::size_t>(sel.total_cells));
  const int n = arity(q);
  for (const auto& s : sel.grids) {
    const GridNode& g = forest.node(s.id);
    const int st = s.stride;
    for (int bk = s.lo[2] / st; bk <= (s.hi[2] - 1) / st; ++bk)
      for (int bj = s.lo[1] / st; bj <= (s.hi[1] - 1) / st; ++bj)
        for (int bi = s.lo[0] / st; bi <= (s.hi[0] - 1) / st; ++bi) {
          const Index3 b0{bi * st, bj * st, bk * st};
          const Index3 b1{std::min(b0[0] + st, g.cells[0]), std::min(b0[1] + st, g.cells[1]),
                          std::min(b0[2] + st, g.cells[2])};
          StreamCell c;
          c.level = static_cast<std::uint8_t>(s.level);
          const Box lo_box = g.cell_box(b0[0], b0[1], b0[2]);
          const Box hi_box = g.cell_box(b1[0] - 1, b1[1] - 1, b1[2] - 1);
          for (int a = 0; a < 3; ++a) {
            c.center[a] = 0.5 * (lo_box.lo[a] + hi_box.hi[a]);
            c.width[a] = hi_box.hi[a] - lo_box.lo[a];
          }
          double count = 0.0;
          for (int k = b0[2]; k < b1[2]; ++k)
            for (int j = b0[1]; j < b1[1]; ++j)
              for (int i = b0[0]; i < b1[0]; ++i) {
                const auto v = detail::cell_value(g, q, i, j, k);
                for (int m = 0; m < n; ++m) c.values[m] += v[m];
                count += 1.0;
              }
          for (int m = 0; m < n; ++m) c.values[m] /= count;
          cs.cells.push_back(c);
        }
  }
  return cs;
}

}  // namespace slwin

#endif
