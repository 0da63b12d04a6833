#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "oracles/random_forest.hpp"
#include "slwin/config.hpp"
#include "slwin/hiergrid.hpp"

using namespace slwin;

namespace {

Box unit() { return {{0, 0, 0}, {1, 1, 1}}; }

double active_volume(const Forest& f) {
  double v = 0.0;
  for (GridId id : f.leaves()) {
    const Box& b = f.node(id).bbox;
    double m = 1.0;
    for (int a = 0; a < 3; ++a)
      if (f.active_axes()[a]) m *= b.extent(a);
    v += m;
  }
  return v;
}

bool interiors_overlap(const Box& a, const Box& b, const AxisSet& axes) {
  for (int i = 0; i < 3; ++i)
    if (axes[i] && std::min(a.hi[i], b.hi[i]) - std::max(a.lo[i], b.lo[i]) <= 1e-12) return false;
  return true;
}

}  // namespace

TEST(CreateRoot, UnitSquareSingleGrid) {
  const Forest f = Forest::create_root(unit(), {1, 1, 1}, {10, 10, 1});
  ASSERT_EQ(f.size(), 1u);
  const GridNode& g = f.node(0);
  EXPECT_TRUE(g.active);
  EXPECT_EQ(g.cells, (Index3{10, 10, 1}));
  EXPECT_EQ(g.bbox, unit());
  EXPECT_EQ(f.active_axes(), (AxisSet{true, true, false}));
}

TEST(CreateRoot, RejectsDegenerateInput) {
  EXPECT_THROW(Forest::create_root({{0, 0, 0}, {1, 0, 1}}, {1, 1, 1}, {10, 10, 1}), GridError);
  EXPECT_THROW(Forest::create_root(unit(), {1, 1, 1}, {0, 10, 1}), GridError);
  EXPECT_THROW(Forest::create_root(unit(), {0, 1, 1}, {10, 10, 1}), GridError);
}

TEST(CreateRoot, TunnelTiling) {
  const Box d{{0, 0, 0}, {4, 1, 1}};
  const Forest f = Forest::create_root(d, {4, 1, 1}, {10, 10, 1});
  ASSERT_EQ(f.size(), 4u);
  EXPECT_NEAR(active_volume(f), 4.0, 1e-12);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b)
      EXPECT_FALSE(interiors_overlap(f.node(a).bbox, f.node(b).bbox, f.active_axes()));
  EXPECT_DOUBLE_EQ(f.node(3).bbox.hi[0], 4.0);
}

TEST(Refine, QuadrantChildren) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {10, 10, 1});
  const auto kids = f.refine(0, {2, 2, 1});
  ASSERT_EQ(kids.size(), 4u);
  EXPECT_FALSE(f.node(0).active);
  const Box& b = f.node(kids[3]).bbox;
  EXPECT_DOUBLE_EQ(b.lo[0], 0.5);
  EXPECT_DOUBLE_EQ(b.lo[1], 0.5);
  EXPECT_DOUBLE_EQ(b.hi[0], 1.0);
  for (GridId k : kids) EXPECT_EQ(f.node(k).cells, (Index3{10, 10, 1}));
  EXPECT_EQ(f.version(), 2u);
}

TEST(Refine, DivisibilityErrorNamesAxis) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {10, 10, 1});
  try {
    f.refine(0, {3, 1, 1});
    FAIL() << "expected a divisibility error";
  } catch (const GridError& e) {
    EXPECT_NE(std::string(e.what()).find("along x"), std::string::npos) << e.what();
  }
}

TEST(Refine, AlreadyRefinedAndDepthLimit) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {10, 10, 1}, 1);
  const auto kids = f.refine(0, {2, 2, 1});
  EXPECT_THROW(f.refine(0, {2, 2, 1}), GridError);
  EXPECT_THROW(f.refine(kids[0], {2, 2, 1}), GridError);
}

TEST(Refine, ConstantParentInjectsIntoChildren) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {10, 10, 1});
  f.node(0).fields.fill(Quantity::p, 3.5);
  for (GridId k : f.refine(0, {2, 2, 1}))
    for (int j = 0; j < 10; ++j)
      for (int i = 0; i < 10; ++i) EXPECT_EQ(f.node(k).fields(Quantity::p, i, j, 0), 3.5);
}

TEST(Refine, InjectionCopiesContainingParentCell) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {4, 4, 1});
  GridNode& g = f.node(0);
  for (int j = 0; j < 4; ++j)
    for (int i = 0; i < 4; ++i) g.fields(Quantity::u, i, j, 0) = 10 * j + i;
  const auto kids = f.refine(0, {2, 2, 1});
  const GridNode& c = f.node(kids[1]);  // x upper half, y lower half
  EXPECT_EQ(c.fields(Quantity::u, 0, 0, 0), 2.0);
  EXPECT_EQ(c.fields(Quantity::u, 3, 3, 0), 13.0);
}

TEST(Refine, RandomSequencesKeepTilingAndDivisibility) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    oracle::ForestSpec spec;
    spec.three_d = t % 3 == 0;
    const Forest f = oracle::random_forest(rng, spec);
    double dom = 1.0;
    for (int a = 0; a < 3; ++a)
      if (f.active_axes()[a]) dom *= f.domain().extent(a);
    EXPECT_NEAR(active_volume(f), dom, 1e-12 * dom);
    const auto leaves = f.leaves();
    for (std::size_t a = 0; a < leaves.size(); ++a)
      for (std::size_t b = a + 1; b < leaves.size(); ++b)
        ASSERT_FALSE(interiors_overlap(f.node(leaves[a]).bbox, f.node(leaves[b]).bbox, f.active_axes()));
    for (const auto& g : f.nodes())
      for (int a = 0; a < 3; ++a) EXPECT_EQ(g.cells[a] % g.subdiv[a], 0);
  }
}

TEST(Refine, PerLevelSubdivisionTable) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {8, 8, 1}, 3, {{2, 2, 1}, {2, 1, 1}});
  const auto l1 = f.refine(0);
  EXPECT_EQ(l1.size(), 4u);
  const auto l2 = f.refine(l1[0]);
  EXPECT_EQ(l2.size(), 2u);
  EXPECT_THROW(f.refine(l1[1], {2, 2, 1}), GridError);
}

TEST(Morton, SpecExamples) {
  const AxisSet xy{true, true, false};
  EXPECT_EQ(morton_interleave({0, 0, 0}), 0u);
  EXPECT_EQ(morton_interleave({1, 1, 0}, xy), 3u);
  EXPECT_EQ(morton_interleave({3, 5, 0}, xy), 39u);
}

TEST(Morton, InterleaveMatchesBitOracle) {
  const AxisSet xy{true, true, false};
  for (std::uint64_t x = 0; x < 8; ++x)
    for (std::uint64_t y = 0; y < 8; ++y) {
      std::uint64_t want = 0;
      for (int b = 0; b < 3; ++b) want |= ((x >> b) & 1) << (2 * b) | ((y >> b) & 1) << (2 * b + 1);
      EXPECT_EQ(morton_interleave({x, y, 0}, xy), want);
      EXPECT_EQ(morton_deinterleave(want, xy), (std::array<std::uint64_t, 3>{x, y, 0}));
    }
}

TEST(Morton, PathOutOfRange) {
  const MortonCodec c({true, true, false}, {{1, 1, 1}, {2, 2, 1}});
  const std::vector<Index3> bad{{0, 0, 0}, {2, 0, 0}};
  EXPECT_THROW(c.encode(bad), Error);
}

TEST(Morton, SiblingsContiguous) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {4, 4, 1});
  auto kids = f.refine(0, {2, 2, 1});
  f.refine(kids[0], {2, 2, 1});
  const auto& lvl = f.topology().level(2);
  ASSERT_EQ(lvl.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(f.morton_key(lvl[i]).value, i);
}

TEST(Distribute, EvenSplits) {
  const Forest f = Forest::create_root({{0, 0, 0}, {4, 1, 1}}, {4, 1, 1}, {10, 10, 1});
  const std::vector<GridId> ids{0, 1, 2, 3};
  auto two = distribute(f, ids, 2);
  EXPECT_EQ(two[0], 0);
  EXPECT_EQ(two[1], 0);
  EXPECT_EQ(two[2], 1);
  EXPECT_EQ(two[3], 1);
  auto four = distribute(f, ids, 4);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(four[i], i);
  EXPECT_TRUE(distribute(f, std::vector<GridId>{}, 3).empty());
}

TEST(Distribute, FiveGridsTwoWorkers) {
  const Forest f = Forest::create_root({{0, 0, 0}, {5, 1, 1}}, {5, 1, 1}, {10, 10, 1});
  const std::vector<GridId> ids{0, 1, 2, 3, 4};
  const auto a = distribute(f, ids, 2);
  int first = 0;
  for (const auto& [id, r] : a) first += r == 0;
  EXPECT_EQ(first, 3);
  // Oracle: contiguous cuts, rank 0 taking as much as possible first; the
  // first cut minimising the larger load wins.
  int best_cut = -1, best = 1 << 30;
  for (int cut = 5; cut >= 0; --cut) {
    const int load = std::max(cut, 5 - cut) * 100;
    if (load < best) {
      best = load;
      best_cut = cut;
    }
  }
  EXPECT_EQ(first, best_cut);
}

TEST(Distribute, TotalOverRandomForests) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    Forest f = oracle::random_forest(rng, {});
    const int workers = 1 + t % 5;
    f.assign_owners(workers);
    for (const auto& g : f.nodes()) {
      EXPECT_GE(g.owner, 0);
      EXPECT_LT(g.owner, workers);
      EXPECT_EQ(f.topology().at(g.id).owner, g.owner);
    }
  }
}

TEST(Topology, SiblingAndBoundaryNeighbours) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {10, 10, 1});
  const auto kids = f.refine(0, {2, 2, 1});
  const auto& t = f.topology();
  EXPECT_EQ(t.find_neighbor(kids[0], Face::xp), kids[1]);
  EXPECT_EQ(t.find_neighbor(kids[0], Face::yp), kids[2]);
  EXPECT_FALSE(t.find_neighbor(kids[0], Face::xm));
  EXPECT_THROW(t.find_neighbor(99, Face::xm), TopologyError);
}

TEST(Topology, CousinsFoundAcrossParents) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {4, 4, 1});
  const auto l1 = f.refine(0, {2, 2, 1});
  const auto a = f.refine(l1[0], {2, 2, 1});
  const auto b = f.refine(l1[1], {2, 2, 1});
  EXPECT_EQ(f.topology().find_neighbor(a[1], Face::xp), b[0]);
  EXPECT_EQ(f.topology().find_neighbor(b[0], Face::xm), a[1]);
}

TEST(Topology, JsonDump) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {4, 4, 1});
  f.refine(0, {2, 2, 1});
  const auto j = f.topology().to_json();
  ASSERT_TRUE(j.contains("grids"));
  EXPECT_EQ(j["grids"].size(), 5u);
}

TEST(Config, JsonRoundTrip) {
  SimConfig c = cavity_config();
  c.layout.max_depth = 5;
  c.fluid.nu = 3.125e-4;
  c.default_budget = 1600;
  const SimConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(back.layout.cells, c.layout.cells);
  EXPECT_EQ(back.layout.subdiv, c.layout.subdiv);
  EXPECT_EQ(back.layout.max_depth, 5);
  EXPECT_EQ(back.refine_to_depth, 3);
  EXPECT_DOUBLE_EQ(back.fluid.nu, 3.125e-4);
  EXPECT_EQ(back.default_budget, 1600u);
  EXPECT_TRUE(back.boundary == c.boundary);
}

TEST(Config, RejectsBadValues) {
  nlohmann::json j = config_to_json(cavity_config());
  j["fluid"]["rho"] = -1.0;
  EXPECT_THROW(config_from_json(j), Error);
}

TEST(Config, ShippedConfigsLoad) {
  const SimConfig cavity = load_config(SLWIN_CONFIG_DIR "/cavity.json");
  EXPECT_EQ(build_forest(cavity).leaves().size(), 64u);
  EXPECT_EQ(cavity.boundary[Face::yp].kind, WallKind::moving_wall);
  const SimConfig channel = load_config(SLWIN_CONFIG_DIR "/channel.json");
  EXPECT_EQ(build_forest(channel).topology().level(0).size(), 4u);
  EXPECT_THROW(load_config(SLWIN_CONFIG_DIR "/missing.json"), ConfigError);
}

TEST(Vtk, StructuredPoints) {
  Forest f = Forest::create_root(unit(), {1, 1, 1}, {2, 2, 1});
  f.node(0).fields.fill(Quantity::p, 1.5);
  std::ostringstream os;
  write_vtk_structured_points(f.node(0), os);
  const std::string s = os.str();
  EXPECT_NE(s.find("DATASET STRUCTURED_POINTS"), std::string::npos);
  EXPECT_NE(s.find("DIMENSIONS 3 3 2"), std::string::npos);
  EXPECT_NE(s.find("CELL_DATA 4"), std::string::npos);
  EXPECT_NE(s.find("SPACING 0.5 0.5 1"), std::string::npos);
}
