#ifndef SLWIN_HIERGRID_HPP
#define SLWIN_HIERGRID_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <tuple>
#include <vector>

#include "fields.hpp"
#include "geometry.hpp"
#include "morton.hpp"
#include "topology.hpp"

namespace slwin {

class GridError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kDefaultMaxDepth = 7;

/// How a ghost face of a grid got its values during the last exchange cycle.
enum class FaceFill : std::uint8_t { unfilled = 0, physical, same_level, parent };

enum class CellType : std::uint8_t { fluid = 0, solid = 1 };

/// One block of the hierarchy.
struct GridNode {
  GridId id = 0;
  int level = 0;
  Box bbox;
  /// Subdivision used for the children; (1,1,1) while unrefined.
  Index3 subdiv{1, 1, 1};
  Index3 cells{1, 1, 1};
  FieldSet fields;
  std::optional<GridId> parent;
  /// Children in x-fastest order: index cx + nx * (cy + ny * cz).
  std::vector<GridId> children;
  bool active = true;
  int owner = 0;
  std::vector<Index3> path;
  Index3 lattice{0, 0, 0};
  std::array<FaceFill, 6> halo{};
  /// Per-cell type over the haloed array; empty when everything is fluid.
  std::vector<std::uint8_t> solid;

  Vec3 cell_width() const {
    return {bbox.extent(0) / cells[0], bbox.extent(1) / cells[1], bbox.extent(2) / cells[2]};
  }
  long long cell_count() const { return product(cells); }
  double cell_volume() const {
    const auto h = cell_width();
    return h[0] * h[1] * h[2];
  }
  Vec3 cell_center(int i, int j, int k) const {
    const auto h = cell_width();
    return {bbox.lo[0] + (i + 0.5) * h[0], bbox.lo[1] + (j + 0.5) * h[1],
            bbox.lo[2] + (k + 0.5) * h[2]};
  }
  Box cell_box(int i, int j, int k) const {
    const auto h = cell_width();
    const Index3 idx{i, j, k};
    Box b;
    for (int a = 0; a < 3; ++a) {
      b.lo[a] = bbox.lo[a] + idx[a] * h[a];
      b.hi[a] = idx[a] + 1 == cells[a] ? bbox.hi[a] : bbox.lo[a] + (idx[a] + 1) * h[a];
    }
    return b;
  }
  bool is_solid(int i, int j, int k) const {
    return !solid.empty() && solid[fields.index(i, j, k)] != 0;
  }
  GridId child_at(const Index3& c) const {
    return children.at(static_cast<std::size_t>(c[0] + subdiv[0] * (c[1] + subdiv[1] * c[2])));
  }
};

/// Grid layout as read from configuration.
struct GridLayout {
  Box domain{{0, 0, 0}, {1, 1, 1}};
  /// Number of level-0 blocks per axis.
  Index3 roots{1, 1, 1};
  /// Interior cells of every grid.
  Index3 cells{10, 10, 1};
  /// Subdivision for levels 1, 2, ...; the last entry repeats. Empty means
  /// each level is pinned by its first refine.
  std::vector<Index3> subdiv;
  int max_depth = kDefaultMaxDepth;
};

inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

/// The block-structured hierarchy: grid storage plus the topology registry.
/// Grid ids are dense indices assigned in creation order.
class Forest {
 public:
  Forest() = default;

  explicit Forest(const GridLayout& layout) : layout_(layout) {
    for (int a = 0; a < 3; ++a) {
      if (!(layout.domain.extent(a) > 0.0) || !std::isfinite(layout.domain.extent(a)))
        throw GridError(std::string("domain extent along ") + axis_name(a) + " must be positive");
      if (layout.cells[a] < 1)
        throw GridError(std::string("cell count along ") + axis_name(a) + " must be >= 1");
      if (layout.roots[a] < 1)
        throw GridError(std::string("level-0 block count along ") + axis_name(a) +
                        " must be >= 1");
    }
    if (layout.max_depth < 0) throw GridError("max depth must be >= 0");
    for (const auto& s : layout.subdiv) check_subdiv_values(s);
    for (int a = 0; a < 3; ++a) axes_[a] = layout.roots[a] * layout.cells[a] > 1;
    topology_ = TopologyIndex(layout.domain, layout.roots, axes_);
    const auto& n = layout.roots;
    for (int k = 0; k < n[2]; ++k)
      for (int j = 0; j < n[1]; ++j)
        for (int i = 0; i < n[0]; ++i) {
          const Index3 idx{i, j, k};
          GridNode g;
          g.id = nodes_.size();
          g.level = 0;
          g.cells = layout.cells;
          g.lattice = idx;
          g.path = {idx};
          g.bbox = lattice_box(0, idx);
          g.fields = FieldSet(g.cells);
          register_node(std::move(g));
        }
    topology_.commit();
  }

  /// Root-level grid set tiling `domain` with `roots` blocks of `cells` cells.
  static Forest create_root(const Box& domain, const Index3& roots, const Index3& cells,
                            int max_depth = kDefaultMaxDepth,
                            std::vector<Index3> level_subdiv = {}) {
    return Forest(GridLayout{domain, roots, cells, std::move(level_subdiv), max_depth});
  }

  const GridLayout& layout() const { return layout_; }
  const Box& domain() const { return layout_.domain; }
  int max_depth() const { return layout_.max_depth; }
  /// Axes along which the domain has more than one cell; the others are
  /// treated as homogeneous (pseudo-2D).
  const AxisSet& active_axes() const { return axes_; }
  const TopologyIndex& topology() const { return topology_; }
  std::uint64_t version() const { return topology_.version(); }
  std::size_t size() const { return nodes_.size(); }

  GridNode& node(GridId id) {
    if (id >= nodes_.size()) throw GridError("unknown grid id " + std::to_string(id));
    return nodes_[id];
  }
  const GridNode& node(GridId id) const {
    if (id >= nodes_.size()) throw GridError("unknown grid id " + std::to_string(id));
    return nodes_[id];
  }
  std::span<GridNode> nodes() { return nodes_; }
  std::span<const GridNode> nodes() const { return nodes_; }

  /// Subdivision configured (or pinned) for level `level` >= 1.
  std::optional<Index3> level_subdiv(int level) const {
    if (level < 1) return std::nullopt;
    if (static_cast<std::size_t>(level) < pinned_.size() && pinned_[level]) return pinned_[level];
    if (layout_.subdiv.empty()) return std::nullopt;
    const auto i = std::min<std::size_t>(level - 1, layout_.subdiv.size() - 1);
    return layout_.subdiv[i];
  }

  /// Active grids, level by level, Morton order within a level.
  std::vector<GridId> leaves() const {
    std::vector<GridId> out;
    for (int l = 0; l < topology_.depth(); ++l)
      for (GridId id : topology_.level(l))
        if (nodes_[id].active) out.push_back(id);
    return out;
  }

  int depth() const { return topology_.depth(); }

  MortonKey morton_key(GridId id) const { return topology_.at(id).key; }

  /// Splits grid `id` into subdiv_x * subdiv_y * subdiv_z children with the
  /// same cell counts. The parent keeps its arrays but leaves the computation.
  std::vector<GridId> refine(GridId id, const Index3& subdiv) {
    const GridNode& g = node(id);
    if (!g.active) throw GridError("grid " + std::to_string(id) + " is already refined");
    check_subdiv_values(subdiv);
    if (subdiv == Index3{1, 1, 1}) throw GridError("subdivision (1,1,1) does not refine");
    for (int a = 0; a < 3; ++a)
      if (g.cells[a] % subdiv[a] != 0)
        throw GridError(std::string("divisibility violated along ") + axis_name(a) + ": " +
                        std::to_string(g.cells[a]) + " cells not divisible by " +
                        std::to_string(subdiv[a]));
    const int child_level = g.level + 1;
    if (child_level > layout_.max_depth)
      throw GridError("grid " + std::to_string(id) + " is at the maximum depth " +
                      std::to_string(layout_.max_depth));
    if (auto pinned = level_subdiv(child_level); pinned && *pinned != subdiv)
      throw GridError("level " + std::to_string(child_level) + " uses subdivision (" +
                      std::to_string((*pinned)[0]) + "," + std::to_string((*pinned)[1]) + "," +
                      std::to_string((*pinned)[2]) + ")");
    pin(child_level, subdiv);

    std::vector<GridId> kids;
    kids.reserve(static_cast<std::size_t>(product(subdiv)));
    for (int cz = 0; cz < subdiv[2]; ++cz)
      for (int cy = 0; cy < subdiv[1]; ++cy)
        for (int cx = 0; cx < subdiv[0]; ++cx) {
          const GridNode& parent = nodes_[id];
          const Index3 c{cx, cy, cz};
          GridNode child;
          child.id = nodes_.size();
          child.level = child_level;
          child.cells = parent.cells;
          child.parent = id;
          child.owner = parent.owner;
          child.path = parent.path;
          child.path.push_back(c);
          for (int a = 0; a < 3; ++a) child.lattice[a] = parent.lattice[a] * subdiv[a] + c[a];
          child.bbox = lattice_box(child_level, child.lattice);
          child.fields = FieldSet(child.cells);
          inject_from_parent(parent, c, subdiv, child);
          kids.push_back(child.id);
          register_node(std::move(child));
        }
    GridNode& parent = nodes_[id];
    parent.subdiv = subdiv;
    parent.children = kids;
    parent.active = false;
    topology_.mark_refined(id, subdiv, kids);
    topology_.commit();
    if (!cell_ops_.empty())
      for (GridId k : kids) rebuild_mask(nodes_[k]);
    return kids;
  }

  /// Refines with the level's configured subdivision.
  std::vector<GridId> refine(GridId id) {
    auto s = level_subdiv(node(id).level + 1);
    if (!s) throw GridError("no subdivision configured for level " +
                            std::to_string(node(id).level + 1));
    return refine(id, *s);
  }

  /// Refines every active grid until all leaves sit at `depth`.
  void refine_uniformly(int depth) {
    for (int l = 0; l < depth; ++l) {
      const auto ids = topology_.level(l);
      for (GridId id : ids)
        if (nodes_[id].active) refine(id);
    }
  }

  /// Applies Morton-order distribution of all grids onto `workers` ranks.
  void assign_owners(int workers);

  // -- cell types ----------------------------------------------------------

  void set_cell_type(const Box& region, CellType type) {
    if (!region.valid()) throw GridError("invalid cell-type region");
    cell_ops_.push_back({region, type});
    for (auto& g : nodes_) rebuild_mask(g);
  }
  bool has_solids() const {
    return std::any_of(cell_ops_.begin(), cell_ops_.end(),
                       [](const auto& op) { return op.second == CellType::solid; });
  }
  const std::vector<std::pair<Box, CellType>>& cell_type_ops() const { return cell_ops_; }

  CellType cell_type_at(const Vec3& p) const {
    CellType t = CellType::fluid;
    for (const auto& [box, type] : cell_ops_)
      if (box.contains(p)) t = type;
    return t;
  }

  std::optional<GridId> find_leaf(const Vec3& p) const { return topology_.find_leaf(p); }

 private:
  static void check_subdiv_values(const Index3& s) {
    for (int a = 0; a < 3; ++a)
      if (s[a] < 1)
        throw GridError(std::string("subdivision along ") + axis_name(a) + " must be >= 1");
  }

  void pin(int level, const Index3& subdiv) {
    if (pinned_.size() <= static_cast<std::size_t>(level)) pinned_.resize(level + 1);
    pinned_[level] = subdiv;
    topology_.pin_radix(level, subdiv);
  }

  Box lattice_box(int level, const Index3& lattice) const {
    const Index3 n = topology_.lattice_extent(level);
    const Box& d = layout_.domain;
    Box b;
    for (int a = 0; a < 3; ++a) {
      b.lo[a] = lattice[a] == 0 ? d.lo[a]
                                : d.lo[a] + d.extent(a) * (double(lattice[a]) / double(n[a]));
      b.hi[a] = lattice[a] + 1 == n[a]
                    ? d.hi[a]
                    : d.lo[a] + d.extent(a) * (double(lattice[a] + 1) / double(n[a]));
    }
    return b;
  }

  /// Piecewise-constant prolongation over the full haloed array.
  static void inject_from_parent(const GridNode& parent, const Index3& c, const Index3& n,
                                 GridNode& child) {
    const auto& nc = child.cells;
    for (int k = -1; k <= nc[2]; ++k)
      for (int j = -1; j <= nc[1]; ++j)
        for (int i = -1; i <= nc[0]; ++i) {
          const int pi = floor_div(c[0] * nc[0] + i, n[0]);
          const int pj = floor_div(c[1] * nc[1] + j, n[1]);
          const int pk = floor_div(c[2] * nc[2] + k, n[2]);
          for (int q = 0; q < kQuantityCount; ++q) {
            const auto qq = static_cast<Quantity>(q);
            child.fields(qq, i, j, k) = parent.fields(qq, pi, pj, pk);
          }
        }
  }

  void rebuild_mask(GridNode& g) {
    if (cell_ops_.empty()) {
      g.solid.clear();
      return;
    }
    g.solid.assign(g.fields.size(), 0);
    for (int k = -1; k <= g.cells[2]; ++k)
      for (int j = -1; j <= g.cells[1]; ++j)
        for (int i = -1; i <= g.cells[0]; ++i)
          g.solid[g.fields.index(i, j, k)] =
              cell_type_at(g.cell_center(i, j, k)) == CellType::solid ? 1 : 0;
  }

  void register_node(GridNode g) {
    TopologyEntry e;
    e.id = g.id;
    e.level = g.level;
    e.bbox = g.bbox;
    e.subdiv = g.subdiv;
    e.cells = g.cells;
    e.parent = g.parent;
    e.owner = g.owner;
    e.active = g.active;
    e.path = g.path;
    e.lattice = g.lattice;
    topology_.add(std::move(e));
    nodes_.push_back(std::move(g));
  }

  GridLayout layout_;
  AxisSet axes_{true, true, true};
  TopologyIndex topology_;
  std::vector<GridNode> nodes_;
  std::vector<std::optional<Index3>> pinned_;
  std::vector<std::pair<Box, CellType>> cell_ops_;
};

/// Orders `grids` along the Z curve (deeper keys padded, parents first) and
/// cuts the sequence into `workers` contiguous chunks by active cell count:
/// a rank keeps taking grids until its cumulative load reaches its share.
inline std::map<GridId, int> distribute(const Forest& forest, std::span<const GridId> grids,
                                        int workers) {
  if (workers < 1) throw GridError("workers must be >= 1");
  std::map<GridId, int> assignment;
  if (grids.empty()) return assignment;
  const auto& topo = forest.topology();
  std::size_t length = 0;
  for (GridId id : grids) length = std::max(length, topo.at(id).path.size());
  struct Item {
    MortonKey key;
    int level;
    GridId id;
  };
  std::vector<Item> order;
  order.reserve(grids.size());
  for (GridId id : grids) {
    const auto& e = topo.at(id);
    order.push_back({topo.codec().encode_padded(e.path, length), e.level, id});
  }
  std::sort(order.begin(), order.end(), [](const Item& a, const Item& b) {
    return std::tie(a.key, a.level, a.id) < std::tie(b.key, b.level, b.id);
  });
  double total = 0.0;
  for (const auto& it : order) {
    const auto& g = forest.node(it.id);
    total += g.active ? static_cast<double>(g.cell_count()) : 0.0;
  }
  double cumulative = 0.0;
  int rank = 0;
  for (const auto& it : order) {
    assignment[it.id] = rank;
    const auto& g = forest.node(it.id);
    cumulative += g.active ? static_cast<double>(g.cell_count()) : 0.0;
    if (rank + 1 < workers && total > 0.0 && cumulative >= total * (rank + 1) / workers) ++rank;
  }
  return assignment;
}

inline void Forest::assign_owners(int workers) {
  std::vector<GridId> all(nodes_.size());
  for (GridId i = 0; i < all.size(); ++i) all[i] = i;
  for (const auto& [id, rank] : distribute(*this, all, workers)) {
    nodes_[id].owner = rank;
    topology_.set_owner(id, rank);
  }
}

/// Legacy VTK structured-points dump of one grid's interior cells.
inline void write_vtk_structured_points(const GridNode& g, std::ostream& os) {
  const auto h = g.cell_width();
  const auto n = g.cells;
  os << "# vtk DataFile Version 3.0\n";
  os << "grid " << g.id << " level " << g.level << "\n";
  os << "ASCII\nDATASET STRUCTURED_POINTS\n";
  os << "DIMENSIONS " << n[0] + 1 << ' ' << n[1] + 1 << ' ' << n[2] + 1 << "\n";
  os.precision(17);
  os << "ORIGIN " << g.bbox.lo[0] << ' ' << g.bbox.lo[1] << ' ' << g.bbox.lo[2] << "\n";
  os << "SPACING " << h[0] << ' ' << h[1] << ' ' << h[2] << "\n";
  os << "CELL_DATA " << g.cell_count() << "\n";
  os << "SCALARS pressure double 1\nLOOKUP_TABLE default\n";
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) os << g.fields(Quantity::p, i, j, k) << "\n";
  os << "VECTORS velocity double\n";
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i)
        os << g.fields(Quantity::u, i, j, k) << ' ' << g.fields(Quantity::v, i, j, k) << ' '
           << g.fields(Quantity::w, i, j, k) << "\n";
}

}  // namespace slwin

#endif
