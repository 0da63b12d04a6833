#ifndef SLWIN_TOPOLOGY_HPP
#define SLWIN_TOPOLOGY_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "geometry.hpp"
#include "morton.hpp"

namespace slwin {

class TopologyError : public Error {
 public:
  using Error::Error;
};

/// What the neighbourhood service knows about one grid: geometry and links,
/// never field data.
struct TopologyEntry {
  GridId id = 0;
  int level = 0;
  Box bbox;
  Index3 subdiv{1, 1, 1};
  Index3 cells{1, 1, 1};
  std::optional<GridId> parent;
  std::vector<GridId> children;
  int owner = 0;
  bool active = true;
  /// Root block index followed by the child index chosen at each level.
  std::vector<Index3> path;
  /// Integer position of the grid in the uniform block lattice of its level.
  Index3 lattice{0, 0, 0};
  MortonKey key;
};

/// Registry of every grid in the hierarchy, answering adjacency, point
/// location and traversal-order queries. Mutated only through the grid
/// forest's refine, which bumps the version.
class TopologyIndex {
 public:
  TopologyIndex() = default;
  TopologyIndex(const Box& domain, const Index3& roots, AxisSet axes)
      : domain_(domain), roots_(roots), codec_(axes, {roots}) {
    tolerance_ = 1e-12 * domain.max_extent();
  }

  const Box& domain() const { return domain_; }
  const MortonCodec& codec() const { return codec_; }
  double tolerance() const { return tolerance_; }
  std::uint64_t version() const { return version_; }
  std::size_t size() const { return entries_.size(); }
  int depth() const { return static_cast<int>(by_level_.size()); }

  bool contains(GridId id) const { return id < entries_.size(); }

  const TopologyEntry& at(GridId id) const {
    if (!contains(id)) throw TopologyError("unknown grid id " + std::to_string(id));
    return entries_[id];
  }

  const std::vector<TopologyEntry>& entries() const { return entries_; }

  /// Grids of one level in Morton order.
  const std::vector<GridId>& level(int l) const {
    static const std::vector<GridId> empty;
    return l >= 0 && l < depth() ? by_level_[l] : empty;
  }

  /// Number of blocks per axis in the lattice of level `l`.
  Index3 lattice_extent(int l) const {
    Index3 n = roots_;
    for (int k = 1; k <= l; ++k)
      for (int a = 0; a < 3; ++a) n[a] *= codec_.radix(k)[a];
    return n;
  }

  /// Same-level grid sharing the full face `f` of `id`, if any.
  std::optional<GridId> find_neighbor(GridId id, Face f) const {
    const auto& e = at(id);
    const int axis = face_axis(f);
    Index3 target = e.lattice;
    target[axis] += face_upper(f) ? 1 : -1;
    const Index3 n = lattice_extent(e.level);
    if (target[axis] < 0 || target[axis] >= n[axis]) return std::nullopt;
    auto it = lattice_.find(lattice_key(e.level, target));
    if (it == lattice_.end()) return std::nullopt;
    const auto& o = entries_[it->second];
    if (!faces_coincide(e.bbox, o.bbox, f))
      throw TopologyError("grids " + std::to_string(id) + " and " + std::to_string(o.id) +
                          " are lattice neighbours but their faces do not coincide");
    return o.id;
  }

  /// True when face `f` of `box` lies on the domain boundary.
  bool on_domain_boundary(const Box& box, Face f) const {
    const int a = face_axis(f);
    return face_upper(f) ? std::abs(box.hi[a] - domain_.hi[a]) <= tolerance_
                         : std::abs(box.lo[a] - domain_.lo[a]) <= tolerance_;
  }

  /// Geometric full-face coincidence: `b` abuts face `f` of `a` and both
  /// share the same tangential extents.
  bool faces_coincide(const Box& a, const Box& b, Face f) const {
    const int ax = face_axis(f);
    const double plane_a = face_upper(f) ? a.hi[ax] : a.lo[ax];
    const double plane_b = face_upper(f) ? b.lo[ax] : b.hi[ax];
    if (std::abs(plane_a - plane_b) > tolerance_) return false;
    for (int t = 0; t < 3; ++t) {
      if (t == ax) continue;
      if (std::abs(a.lo[t] - b.lo[t]) > tolerance_ || std::abs(a.hi[t] - b.hi[t]) > tolerance_)
        return false;
    }
    return true;
  }

  /// Root block containing `p`, or none when p is outside the domain.
  std::optional<GridId> find_root(const Vec3& p) const {
    if (!domain_.contains(p)) return std::nullopt;
    Index3 idx;
    for (int a = 0; a < 3; ++a) {
      const double t = (p[a] - domain_.lo[a]) / domain_.extent(a) * roots_[a];
      idx[a] = std::clamp(static_cast<int>(std::floor(t)), 0, roots_[a] - 1);
    }
    auto it = lattice_.find(lattice_key(0, idx));
    return it == lattice_.end() ? std::nullopt : std::optional<GridId>(it->second);
  }

  /// Active grid whose box contains `p`. On shared faces the upper block wins,
  /// except at the domain's upper boundary.
  std::optional<GridId> find_leaf(const Vec3& p) const {
    auto cur = find_root(p);
    if (!cur) return std::nullopt;
    while (!entries_[*cur].children.empty()) {
      const auto& e = entries_[*cur];
      Index3 c;
      for (int a = 0; a < 3; ++a) {
        const double t = (p[a] - e.bbox.lo[a]) / e.bbox.extent(a) * e.subdiv[a];
        c[a] = std::clamp(static_cast<int>(std::floor(t)), 0, e.subdiv[a] - 1);
      }
      cur = e.children[static_cast<std::size_t>(c[0] + e.subdiv[0] * (c[1] + e.subdiv[1] * c[2]))];
    }
    return cur;
  }

  // -- mutation, used by the forest -------------------------------------

  void pin_radix(int level, const Index3& subdiv) { codec_.set_radix(level, subdiv); }

  void add(TopologyEntry e) {
    if (e.id != entries_.size()) throw TopologyError("grid ids must be registered in order");
    e.key = codec_.encode(e.path);
    if (static_cast<int>(by_level_.size()) <= e.level) by_level_.resize(e.level + 1);
    lattice_.emplace(lattice_key(e.level, e.lattice), e.id);
    by_level_[e.level].push_back(e.id);
    entries_.push_back(std::move(e));
    dirty_levels_.push_back(entries_.back().level);
  }

  void mark_refined(GridId id, const Index3& subdiv, std::vector<GridId> children) {
    auto& e = entries_.at(id);
    e.subdiv = subdiv;
    e.children = std::move(children);
    e.active = false;
  }

  void set_owner(GridId id, int owner) { entries_.at(id).owner = owner; }

  /// Re-sorts touched levels and bumps the version; call after a batch of adds.
  void commit() {
    std::sort(dirty_levels_.begin(), dirty_levels_.end());
    dirty_levels_.erase(std::unique(dirty_levels_.begin(), dirty_levels_.end()),
                        dirty_levels_.end());
    for (int l : dirty_levels_) {
      auto& ids = by_level_[l];
      std::sort(ids.begin(), ids.end(), [&](GridId a, GridId b) {
        return entries_[a].key < entries_[b].key;
      });
    }
    dirty_levels_.clear();
    ++version_;
  }

  nlohmann::json to_json() const {
    nlohmann::json grids = nlohmann::json::array();
    for (const auto& e : entries_) {
      nlohmann::json g;
      g["id"] = e.id;
      g["level"] = e.level;
      g["bbox"] = {{"lo", e.bbox.lo}, {"hi", e.bbox.hi}};
      g["owner"] = e.owner;
      g["active"] = e.active;
      g["morton"] = e.key.value;
      g["parent"] = e.parent ? nlohmann::json(*e.parent) : nlohmann::json(nullptr);
      g["children"] = e.children;
      nlohmann::json nb;
      for (Face f : kAllFaces) {
        auto n = find_neighbor(e.id, f);
        nb[face_name(f)] = n ? nlohmann::json(*n) : nlohmann::json(nullptr);
      }
      g["neighbors"] = nb;
      grids.push_back(std::move(g));
    }
    return {{"version", version_}, {"domain", {{"lo", domain_.lo}, {"hi", domain_.hi}}},
            {"grids", std::move(grids)}};
  }

 private:
  static std::uint64_t lattice_key(int level, const Index3& l) {
    constexpr int kBits = 19;
    for (int a = 0; a < 3; ++a)
      if (l[a] < 0 || l[a] >= (1 << kBits)) throw TopologyError("lattice index out of range");
    return (static_cast<std::uint64_t>(level) << (3 * kBits)) |
           (static_cast<std::uint64_t>(l[2]) << (2 * kBits)) |
           (static_cast<std::uint64_t>(l[1]) << kBits) | static_cast<std::uint64_t>(l[0]);
  }

  Box domain_;
  Index3 roots_{1, 1, 1};
  MortonCodec codec_;
  double tolerance_ = 0.0;
  std::uint64_t version_ = 0;
  std::vector<TopologyEntry> entries_;
  std::vector<std::vector<GridId>> by_level_;
  std::unordered_map<std::uint64_t, GridId> lattice_;
  std::vector<int> dirty_levels_;
};

}  // namespace slwin

#endif
