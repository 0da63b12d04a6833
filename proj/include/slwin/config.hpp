#ifndef SLWIN_CONFIG_HPP
#define SLWIN_CONFIG_HPP

#include <fstream>
#include <string>

#include <json.hpp>

#include "hiergrid.hpp"
#include "solver.hpp"

namespace slwin {

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Everything needed to start a server: grid layout, initial refinement,
/// fluid parameters, boundary conditions and service settings.
struct SimConfig {
  GridLayout layout;
  int refine_to_depth = 0;
  FluidParams fluid;
  BoundarySpec boundary = BoundarySpec::lid_driven_cavity();
  std::uint32_t default_budget = 400;
  int workers = 1;
  int max_subs = 4;
  /// With an export directory, write the default full-domain stream every
  /// this many steps.
  int export_every = 10;
};

namespace detail {

inline Vec3 vec3_of(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(std::string(what) + " must be [x, y, z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Index3 index3_of(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(std::string(what) + " must be [x, y, z]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

inline const char* wall_kind_name(WallKind k) {
  switch (k) {
    case WallKind::no_slip: return "no_slip";
    case WallKind::moving_wall: return "moving_wall";
    case WallKind::inflow: return "inflow";
    case WallKind::outflow: return "outflow";
  }
  return "?";
}

}  // namespace detail

inline WallKind parse_wall_kind(const std::string& s) {
  if (s == "no_slip") return WallKind::no_slip;
  if (s == "moving_wall") return WallKind::moving_wall;
  if (s == "inflow") return WallKind::inflow;
  if (s == "outflow") return WallKind::outflow;
  throw ConfigError("unknown boundary kind '" + s + "'");
}

inline SimConfig config_from_json(const nlohmann::json& j) {
  SimConfig c;
  try {
    if (j.contains("domain")) {
      c.layout.domain.lo = detail::vec3_of(j["domain"].at("lo"), "domain.lo");
      c.layout.domain.hi = detail::vec3_of(j["domain"].at("hi"), "domain.hi");
    }
    if (j.contains("grid")) {
      const auto& g = j["grid"];
      if (g.contains("level0_subdiv")) c.layout.roots = detail::index3_of(g["level0_subdiv"], "grid.level0_subdiv");
      if (g.contains("cells")) c.layout.cells = detail::index3_of(g["cells"], "grid.cells");
      if (g.contains("subdiv")) {
        c.layout.subdiv.clear();
        const auto& s = g["subdiv"];
        if (s.is_array() && !s.empty() && s[0].is_number())
          c.layout.subdiv.push_back(detail::index3_of(s, "grid.subdiv"));
        else
          for (const auto& e : s) c.layout.subdiv.push_back(detail::index3_of(e, "grid.subdiv"));
      }
      c.layout.max_depth = g.value("max_depth", c.layout.max_depth);
      c.refine_to_depth = g.value("refine_to_depth", c.refine_to_depth);
    }
    if (j.contains("fluid")) {
      const auto& f = j["fluid"];
      c.fluid.rho = f.value("rho", c.fluid.rho);
      c.fluid.nu = f.value("nu", c.fluid.nu);
      c.fluid.dt = f.value("dt", c.fluid.dt);
      c.fluid.cfl = f.value("cfl", c.fluid.cfl);
      c.fluid.adaptive_dt = f.value("adaptive_dt", c.fluid.adaptive_dt);
      c.fluid.poisson_tol = f.value("poisson_tol", c.fluid.poisson_tol);
      c.fluid.poisson_max_iter = f.value("poisson_max_iter", c.fluid.poisson_max_iter);
      c.fluid.jacobi_omega = f.value("jacobi_omega", c.fluid.jacobi_omega);
      const std::string m = f.value("poisson_method", std::string("direct"));
      if (m == "direct")
        c.fluid.poisson_method = PoissonMethod::direct;
      else if (m == "jacobi")
        c.fluid.poisson_method = PoissonMethod::jacobi;
      else
        throw ConfigError("unknown poisson_method '" + m + "'");
    }
    if (j.contains("boundary")) {
      c.boundary = BoundarySpec{};
      for (const auto& [face, spec] : j["boundary"].items()) {
        WallCondition w;
        w.kind = parse_wall_kind(spec.value("kind", std::string("no_slip")));
        if (spec.contains("velocity")) w.velocity = detail::vec3_of(spec["velocity"], "velocity");
        c.boundary[parse_face(face)] = w;
      }
    }
    c.default_budget = j.value("default_budget", c.default_budget);
    c.workers = j.value("workers", c.workers);
    c.max_subs = j.value("max_subs", c.max_subs);
    c.export_every = j.value("export_every", c.export_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.fluid.validate();
  c.boundary.validate();
  if (c.default_budget < 1) throw ConfigError("default_budget must be >= 1");
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  if (c.max_subs < 0) throw ConfigError("max_subs must be >= 0");
  if (c.export_every < 1) throw ConfigError("export_every must be >= 1");
  if (c.refine_to_depth < 0 || c.refine_to_depth > c.layout.max_depth)
    throw ConfigError("refine_to_depth must lie in [0, max_depth]");
  return c;
}

inline nlohmann::json config_to_json(const SimConfig& c) {
  nlohmann::json bc;
  for (Face f : kAllFaces)
    bc[face_name(f)] = {{"kind", detail::wall_kind_name(c.boundary[f].kind)},
                        {"velocity", c.boundary[f].velocity}};
  nlohmann::json subdiv = nlohmann::json::array();
  for (const auto& s : c.layout.subdiv) subdiv.push_back(s);
  return {{"domain", {{"lo", c.layout.domain.lo}, {"hi", c.layout.domain.hi}}},
          {"grid",
           {{"level0_subdiv", c.layout.roots},
            {"cells", c.layout.cells},
            {"subdiv", subdiv},
            {"max_depth", c.layout.max_depth},
            {"refine_to_depth", c.refine_to_depth}}},
          {"fluid",
           {{"rho", c.fluid.rho},
            {"nu", c.fluid.nu},
            {"dt", c.fluid.dt},
            {"cfl", c.fluid.cfl},
            {"adaptive_dt", c.fluid.adaptive_dt},
            {"poisson_tol", c.fluid.poisson_tol},
            {"poisson_max_iter", c.fluid.poisson_max_iter},
            {"poisson_method",
             c.fluid.poisson_method == PoissonMethod::direct ? "direct" : "jacobi"},
            {"jacobi_omega", c.fluid.jacobi_omega}}},
          {"boundary", bc},
          {"default_budget", c.default_budget},
          {"workers", c.workers},
          {"max_subs", c.max_subs},
          {"export_every", c.export_every}};
}

inline SimConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

/// Lid-driven cavity on the unit square: 10x10 cells per grid, 2x2
/// subdivision, refined to depth 3.
inline SimConfig cavity_config() {
  SimConfig c;
  c.layout.cells = {10, 10, 1};
  c.layout.subdiv = {{2, 2, 1}};
  c.refine_to_depth = 3;
  c.fluid.nu = 0.01;
  c.fluid.dt = 0.003;
  return c;
}

inline Forest build_forest(const SimConfig& c) {
  Forest f(c.layout);
  f.refine_uniformly(c.refine_to_depth);
  f.assign_owners(c.workers);
  return f;
}

}  // namespace slwin

#endif
