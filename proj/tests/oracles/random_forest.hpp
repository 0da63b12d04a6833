#ifndef ORACLE_RANDOM_FOREST_HPP
#define ORACLE_RANDOM_FOREST_HPP

#include <random>

#include "slwin/hiergrid.hpp"

namespace oracle {

struct ForestSpec {
  bool three_d = false;
  int max_roots = 3;
  int max_depth = 3;
  double refine_probability = 0.4;
};

/// Random forest: random domain, root tiling, cell counts and per-level
/// subdivisions, refined by coin flips down to `max_depth`.
inline slwin::Forest random_forest(std::mt19937_64& rng, const ForestSpec& spec) {
  using namespace slwin;
  std::uniform_real_distribution<double> lo(-1.0, 1.0), ext(0.5, 3.0), coin(0.0, 1.0);
  std::uniform_int_distribution<int> roots(1, spec.max_roots);
  const int dims = spec.three_d ? 3 : 2;
  GridLayout L;
  for (int a = 0; a < 3; ++a) {
    L.domain.lo[a] = lo(rng);
    L.domain.hi[a] = L.domain.lo[a] + ext(rng);
  }
  const int cell_choices[] = {2, 4, 6};
  std::uniform_int_distribution<int> pick(0, 2);
  for (int a = 0; a < 3; ++a) {
    if (a < dims) {
      L.roots[a] = roots(rng);
      L.cells[a] = cell_choices[pick(rng)];
    } else {
      L.roots[a] = 1;
      L.cells[a] = 1;
    }
  }
  L.max_depth = spec.max_depth;
  for (int l = 1; l <= spec.max_depth; ++l) {
    Index3 s{1, 1, 1};
    do {
      for (int a = 0; a < dims; ++a) s[a] = coin(rng) < 0.7 ? 2 : 1;
    } while (s == Index3{1, 1, 1});
    L.subdiv.push_back(s);
  }
  Forest f(L);
  for (int l = 0; l < spec.max_depth; ++l) {
    std::vector<GridId> level_leaves;
    for (GridId id : f.leaves())
      if (f.node(id).level == l) level_leaves.push_back(id);
    for (GridId id : level_leaves)
      if (coin(rng) < spec.refine_probability) f.refine(id);
  }
  return f;
}

/// Random box overlapping (mostly) the domain; faces sometimes snapped to
/// grid planes so touching cases are exercised.
inline slwin::Box random_window(std::mt19937_64& rng, const slwin::Forest& f) {
  using namespace slwin;
  const Box& d = f.domain();
  std::uniform_real_distribution<double> u(-0.2, 1.2), coin(0.0, 1.0);
  Box w;
  for (int a = 0; a < 3; ++a) {
    if (!f.active_axes()[a]) {
      w.lo[a] = d.lo[a];
      w.hi[a] = d.hi[a];
      continue;
    }
    double t0 = u(rng), t1 = u(rng);
    if (t0 > t1) std::swap(t0, t1);
    if (t1 - t0 < 1e-3) t1 = t0 + 0.1;
    if (coin(rng) < 0.3) {
      const int n = f.layout().roots[a] * 4;
      t0 = std::round(t0 * n) / n;
      t1 = std::max(t0 + 1.0 / n, std::round(t1 * n) / n);
    }
    w.lo[a] = d.lo[a] + t0 * d.extent(a);
    w.hi[a] = d.lo[a] + t1 * d.extent(a);
  }
  return w;
}

}  // namespace oracle

#endif
