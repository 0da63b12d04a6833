#ifndef SLWIN_SIMULATION_HPP
#define SLWIN_SIMULATION_HPP

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

#include "config.hpp"
#include "protocol.hpp"
#include "subsim.hpp"

namespace slwin {

/// A steering command that cannot be applied. The connection stays open.
class SteerRejected : public Error {
 public:
  using Error::Error;
};

class UnknownSimulation : public Error {
 public:
  using Error::Error;
};

/// Immutable state published at a step boundary. Readers hold the pointer
/// as long as they need it; the simulation never touches it again.
struct SimSnapshot {
  std::shared_ptr<const Forest> forest;
  double time = 0.0;
  /// Step-boundary label; 0 is the initial state.
  std::uint64_t step = 0;
  std::uint64_t integrations = 0;
  StepReport last;
  bool paused = false;
  double nu = 0.0;
};

struct SimCounters {
  std::atomic<std::uint64_t> boundaries{0};
  std::atomic<std::uint64_t> integrations{0};
  std::atomic<std::uint64_t> commands_applied{0};
  std::atomic<std::uint64_t> commands_failed{0};
  std::atomic<std::uint64_t> commands_rejected{0};
  std::atomic<std::uint64_t> integration_failures{0};
  std::atomic<std::uint64_t> state_lock_acquisitions{0};
  std::atomic<std::uint64_t> queries{0};
  std::atomic<std::uint64_t> stale_retries{0};
  std::atomic<std::uint64_t> exports{0};
};

/// The main simulation plus its sub-simulations. Integration and command
/// application happen on one thread at step boundaries; queries read the
/// latest published snapshot and never wait for integration.
class Simulation {
 public:
  explicit Simulation(SimConfig cfg)
      : cfg_(std::move(cfg)), forest_(build_forest(cfg_)), bc_(cfg_.boundary), fluid_(cfg_.fluid) {
    model_ = make_boundary_model(bc_, forest_.active_axes());
    run_exchange_cycle(forest_, kFlow, model_.fill);
    publish();
  }

  ~Simulation() { stop(); }
  Simulation(const Simulation&) = delete;
  Simulation& operator=(const Simulation&) = delete;

  const SimConfig& config() const { return cfg_; }
  const SimCounters& counters() const { return counters_; }

  void set_export_dir(std::filesystem::path dir) {
    std::filesystem::create_directories(dir);
    std::lock_guard lk(state_mutex_);
    export_dir_ = std::move(dir);
  }

  /// Validates `c` against the latest snapshot and queues it for the next
  /// step boundary, whose label is returned.
  proto::SteerAck submit(proto::SteerCommand c) {
    const auto snap = snapshot();
    // Regions span the whole domain along homogeneous axes.
    const auto& axes = snap->forest->active_axes();
    for (int a = 0; a < 3; ++a)
      if (!axes[a]) {
        c.region.lo[a] = snap->forest->domain().lo[a];
        c.region.hi[a] = snap->forest->domain().hi[a];
      }
    std::lock_guard lk(queue_mutex_);
    try {
      validate(c, *snap->forest);
    } catch (const SteerRejected&) {
      ++counters_.commands_rejected;
      throw;
    }
    proto::SteerAck ack{next_boundary_, 0};
    if (c.kind == proto::SteerKind::spawn_sub) {
      ack.sub_id = next_sub_id_++;
      ++pending_subs_;
    }
    if (c.kind == proto::SteerKind::refine && c.grid) pending_refines_.insert(*c.grid);
    queue_.push_back({c, ack.sub_id});
    queue_cv_.notify_all();
    return ack;
  }

  /// Runs one step boundary: drain the queue, apply the commands in
  /// submission order, integrate unless paused, publish.
  void advance() {
    std::vector<Pending> cmds;
    std::uint64_t label;
    {
      std::lock_guard lk(queue_mutex_);
      cmds.swap(queue_);
      label = next_boundary_++;
      pending_refines_.clear();
    }
    {
      std::lock_guard lk(state_mutex_);
      ++counters_.state_lock_acquisitions;
      for (const auto& p : cmds) apply(p);
      if (!cmds.empty()) run_exchange_cycle(forest_, kFlow, model_.fill);
      if (!paused_) {
        try {
          integrate();
        } catch (const Error& e) {
          paused_ = true;
          ++counters_.integration_failures;
          std::lock_guard slk(snap_mutex_);
          last_failure_ = e.what();
        }
      }
      label_ = label;
      ++counters_.boundaries;
      publish();
      if (!export_dir_.empty() && label % static_cast<std::uint64_t>(cfg_.export_every) == 0)
        export_streams();
    }
    publish_cv_.notify_all();
  }

  /// Starts the stepping thread. While paused with nothing queued it sleeps,
  /// so no boundary passes and published state stays fixed.
  void start() {
    if (thread_.joinable()) return;
    stop_ = false;
    thread_ = std::thread([this] {
      while (!stop_) {
        {
          std::unique_lock lk(queue_mutex_);
          queue_cv_.wait(lk, [this] { return stop_ || !queue_.empty() || !paused_.load(); });
          if (stop_) break;
        }
        advance();
      }
    });
  }

  void stop() {
    {
      std::lock_guard lk(queue_mutex_);
      stop_ = true;
    }
    queue_cv_.notify_all();
    if (thread_.joinable()) thread_.join();
  }

  bool running() const { return thread_.joinable(); }
  bool paused() const { return paused_; }

  std::shared_ptr<const SimSnapshot> snapshot() const {
    std::lock_guard lk(snap_mutex_);
    return main_snap_;
  }

  std::shared_ptr<const SimSnapshot> sub_snapshot(std::uint32_t id) const {
    std::lock_guard lk(snap_mutex_);
    auto it = sub_snaps_.find(id);
    return it == sub_snaps_.end() ? nullptr : it->second;
  }

  std::vector<std::uint32_t> sub_ids() const {
    std::lock_guard lk(snap_mutex_);
    std::vector<std::uint32_t> out;
    for (const auto& [id, s] : sub_snaps_) out.push_back(id);
    return out;
  }

  /// Blocks until a snapshot labelled `step` or later is published.
  std::shared_ptr<const SimSnapshot> wait_for(std::uint64_t step,
                                              std::chrono::milliseconds timeout) const {
    std::unique_lock lk(snap_mutex_);
    publish_cv_.wait_for(lk, timeout, [&] { return main_snap_->step >= step; });
    return main_snap_;
  }

  /// Selection plus extraction on a snapshot. A selection that turns stale
  /// is retried once against the newest snapshot.
  CellStream query(const proto::WindowRequest& r) {
    ++counters_.queries;
    auto pick = [&]() {
      auto s = r.sim_id == 0 ? snapshot() : sub_snapshot(r.sim_id);
      if (!s) throw UnknownSimulation("no simulation with id " + std::to_string(r.sim_id));
      return s;
    };
    auto snap = pick();
    auto sel = select(*snap->forest, r.query);
    for (int attempt = 0;; ++attempt) {
      try {
        return extract(*snap->forest, sel, r.query.quantity, snap->time, snap->step);
      } catch (const StaleSelection&) {
        if (attempt > 0) throw;
        ++counters_.stale_retries;
        snap = pick();
        sel = select(*snap->forest, r.query);
      }
    }
  }

  /// Full-domain query with the configured budget.
  proto::WindowRequest default_request(StreamQuantity q = StreamQuantity::velocity,
                                       std::uint32_t sim = 0) const {
    proto::WindowRequest r;
    r.sim_id = sim;
    r.query.quantity = q;
    r.query.max_cells = cfg_.default_budget;
    if (auto s = sim == 0 ? snapshot() : sub_snapshot(sim)) r.query.bbox = s->forest->domain();
    return r;
  }

  nlohmann::json metrics() const {
    const auto snap = snapshot();
    const Forest& f = *snap->forest;
    std::size_t cells = 0;
    const auto leaves = f.leaves();
    for (GridId id : leaves) cells += static_cast<std::size_t>(product(f.node(id).cells));
    nlohmann::json subs = nlohmann::json::array();
    for (auto id : sub_ids())
      if (auto s = sub_snapshot(id))
        subs.push_back({{"id", id},
                        {"bbox", {s->forest->domain().lo, s->forest->domain().hi}},
                        {"cells", product(s->forest->node(0).cells)},
                        {"time", s->time},
                        {"max_div", s->last.max_div}});
    nlohmann::json j;
    j["step"] = snap->step;
    j["integrations"] = snap->integrations;
    j["time"] = snap->time;
    j["paused"] = snap->paused;
    j["nu"] = snap->nu;
    j["dt"] = snap->last.dt;
    j["max_div"] = snap->last.max_div;
    j["poisson_iterations"] = snap->last.poisson_iterations;
    j["poisson_residual"] = snap->last.residual;
    j["topology_version"] = f.version();
    j["grids"] = f.size();
    j["leaves"] = leaves.size();
    j["leaf_cells"] = cells;
    j["depth"] = f.depth();
    j["subs"] = subs;
    j["counters"] = {{"boundaries", counters_.boundaries.load()},
                     {"integrations", counters_.integrations.load()},
                     {"commands_applied", counters_.commands_applied.load()},
                     {"commands_failed", counters_.commands_failed.load()},
                     {"integration_failures", counters_.integration_failures.load()},
                     {"commands_rejected", counters_.commands_rejected.load()},
                     {"state_lock_acquisitions", counters_.state_lock_acquisitions.load()},
                     {"queries", counters_.queries.load()},
                     {"stale_retries", counters_.stale_retries.load()},
                     {"exports", counters_.exports.load()}};
    {
      std::lock_guard lk(snap_mutex_);
      if (!last_failure_.empty()) j["last_failure"] = last_failure_;
    }
    return j;
  }

 private:
  struct Pending {
    proto::SteerCommand cmd;
    std::uint32_t sub_id = 0;
  };

  static bool overlaps(const Box& a, const Box& b, const AxisSet& axes) {
    for (int i = 0; i < 3; ++i) {
      const double lo = std::max(a.lo[i], b.lo[i]), hi = std::min(a.hi[i], b.hi[i]);
      if (axes[i] ? !(hi > lo) : hi < lo) return false;
    }
    return true;
  }

  static std::vector<GridId> refine_targets(const Forest& f, const Box& region) {
    std::vector<GridId> out;
    for (GridId id : f.leaves()) {
      const GridNode& g = f.node(id);
      if (g.level >= f.max_depth() || !overlaps(g.bbox, region, f.active_axes())) continue;
      out.push_back(id);
    }
    return out;
  }

  static void check_refinable(const Forest& f, GridId id) {
    if (id >= f.size()) throw SteerRejected("unknown grid id " + std::to_string(id));
    const GridNode& g = f.node(id);
    if (!g.active) throw SteerRejected("grid " + std::to_string(id) + " is already refined");
    if (g.level >= f.max_depth())
      throw SteerRejected("grid " + std::to_string(id) + " is at the maximum depth");
    const auto s = f.level_subdiv(g.level + 1);
    if (!s) throw SteerRejected("no subdivision configured for level " + std::to_string(g.level + 1));
    for (int a = 0; a < 3; ++a)
      if (g.cells[a] % (*s)[a] != 0)
        throw SteerRejected(std::string("divisibility violated along ") + axis_name(a));
  }

  void validate(const proto::SteerCommand& c, const Forest& f) const {
    using K = proto::SteerKind;
    const Box& d = f.domain();
    auto finite_box = [](const Box& b) {
      for (int a = 0; a < 3; ++a)
        if (!std::isfinite(b.lo[a]) || !std::isfinite(b.hi[a]) || b.lo[a] > b.hi[a]) return false;
      return true;
    };
    switch (c.kind) {
      case K::set_boundary: {
        BoundarySpec next = bc_snapshot();
        next[c.face] = c.wall;
        try {
          next.validate();
        } catch (const Error& e) {
          throw SteerRejected(e.what());
        }
        break;
      }
      case K::refine:
        if (c.grid) {
          if (pending_refines_.count(*c.grid))
            throw SteerRejected("grid " + std::to_string(*c.grid) + " already has a pending refine");
          check_refinable(f, *c.grid);
        } else {
          if (!finite_box(c.region)) throw SteerRejected("invalid refine region");
          const auto t = refine_targets(f, c.region);
          if (t.empty()) throw SteerRejected("no refinable grid in the region");
          for (GridId id : t) check_refinable(f, id);
        }
        break;
      case K::set_cell_type:
        if (!finite_box(c.region) || !overlaps(c.region, d, f.active_axes()))
          throw SteerRejected("cell-type region misses the domain");
        if (c.cell_type != CellType::fluid && c.cell_type != CellType::solid)
          throw SteerRejected("unknown cell type");
        break;
      case K::set_viscosity:
        if (!std::isfinite(c.value) || c.value < 0.0)
          throw SteerRejected("viscosity must be finite and >= 0");
        break;
      case K::pause:
      case K::resume: break;
      case K::spawn_sub: {
        const int live = static_cast<int>(sub_ids().size()) + pending_subs_;
        if (live >= cfg_.max_subs)
          throw SteerRejected("sub-simulation limit of " + std::to_string(cfg_.max_subs) + " reached");
        if (c.depth < 0 || c.depth > 4) throw SteerRejected("sub-simulation depth must lie in [0, 4]");
        if (!finite_box(c.region)) throw SteerRejected("invalid sub-simulation box");
        const auto& axes = f.active_axes();
        const double tol = f.topology().tolerance();
        for (int a = 0; a < 3; ++a) {
          if (c.region.lo[a] < d.lo[a] - tol || c.region.hi[a] > d.hi[a] + tol)
            throw SteerRejected("sub-simulation box lies outside the domain");
          if (axes[a] && !(c.region.hi[a] > c.region.lo[a]))
            throw SteerRejected(std::string("sub-simulation box is flat along ") + axis_name(a));
        }
        break;
      }
      default: throw SteerRejected("unknown steering command");
    }
  }

  BoundarySpec bc_snapshot() const {
    std::lock_guard lk(snap_mutex_);
    return published_bc_;
  }

  void apply(const Pending& p) {
    using K = proto::SteerKind;
    const auto& c = p.cmd;
    try {
      switch (c.kind) {
        case K::set_boundary:
          bc_[c.face] = c.wall;
          bc_.validate();
          model_ = make_boundary_model(bc_, forest_.active_axes());
          break;
        case K::refine:
          if (c.grid) {
            forest_.refine(*c.grid);
          } else {
            for (GridId id : refine_targets(forest_, c.region)) forest_.refine(id);
          }
          forest_.assign_owners(cfg_.workers);
          break;
        case K::set_cell_type:
          forest_.set_cell_type(c.region, c.cell_type);
          if (c.cell_type == CellType::solid) zero_solid_velocity();
          break;
        case K::set_viscosity: fluid_.nu = c.value; break;
        case K::pause: paused_ = true; break;
        case K::resume: paused_ = false; break;
        case K::spawn_sub: {
          run_exchange_cycle(forest_, kFlow, model_.fill);
          auto sub = std::make_unique<SubSimulation>(p.sub_id, forest_, c.region, c.depth, bc_);
          subs_.emplace(p.sub_id, std::move(sub));
          break;
        }
      }
      ++counters_.commands_applied;
    } catch (const Error& e) {
      ++counters_.commands_failed;
      std::lock_guard lk(snap_mutex_);
      last_failure_ = e.what();
    }
    if (c.kind == K::spawn_sub) {
      std::lock_guard lk(queue_mutex_);
      --pending_subs_;
    }
  }

  void zero_solid_velocity() {
    for (auto& g : forest_.nodes()) {
      if (g.solid.empty()) continue;
      for (int k = 0; k < g.cells[2]; ++k)
        for (int j = 0; j < g.cells[1]; ++j)
          for (int i = 0; i < g.cells[0]; ++i)
            if (g.is_solid(i, j, k))
              for (int a = 0; a < 3; ++a) g.fields(velocity_component(a), i, j, k) = 0.0;
    }
  }

  void integrate() {
    FluidParams params = fluid_;
    if (!params.adaptive_dt) {
      // Refinement can push a fixed step past the explicit limit.
      FluidParams bound = params;
      bound.cfl = 1.0;
      if (params.dt > stable_dt(forest_, bound)) params.adaptive_dt = true;
    }
    last_ = step(forest_, params, model_, &poisson_);
    time_ += last_.dt;
    ++integrations_;
    ++counters_.integrations;
    for (auto& [id, sub] : subs_) {
      sub->couple(forest_);
      sub->advance(last_.dt, fluid_);
    }
  }

  void publish() {
    auto s = std::make_shared<SimSnapshot>();
    s->forest = std::make_shared<const Forest>(forest_);
    s->time = time_;
    s->step = label_;
    s->integrations = integrations_;
    s->last = last_;
    s->paused = paused_;
    s->nu = fluid_.nu;
    std::map<std::uint32_t, std::shared_ptr<const SimSnapshot>> subs;
    for (const auto& [id, sub] : subs_) {
      auto ss = std::make_shared<SimSnapshot>();
      ss->forest = std::make_shared<const Forest>(sub->forest());
      ss->time = sub->time();
      ss->step = label_;
      ss->integrations = sub->steps();
      ss->last = sub->last_report();
      ss->paused = paused_;
      ss->nu = fluid_.nu;
      subs.emplace(id, std::move(ss));
    }
    std::lock_guard lk(snap_mutex_);
    main_snap_ = std::move(s);
    sub_snaps_ = std::move(subs);
    published_bc_ = bc_;
  }

  void export_streams() {
    auto write = [&](std::uint32_t sim, const std::string& name) {
      const CellStream cs = query(default_request(StreamQuantity::velocity, sim));
      const auto bytes = proto::encode_cell_stream(cs);
      char file[64];
      std::snprintf(file, sizeof file, "%s_%08llu.cells", name.c_str(),
                    static_cast<unsigned long long>(label_));
      std::ofstream os(export_dir_ / file, std::ios::binary);
      os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      ++counters_.exports;
    };
    write(0, "main");
    for (const auto& [id, sub] : subs_) write(id, "sub" + std::to_string(id));
  }

  SimConfig cfg_;

  // Integration state, guarded by state_mutex_.
  std::mutex state_mutex_;
  Forest forest_;
  BoundarySpec bc_;
  FluidParams fluid_;
  BoundaryModel model_;
  DirectPoisson poisson_;
  std::map<std::uint32_t, std::unique_ptr<SubSimulation>> subs_;
  double time_ = 0.0;
  std::uint64_t integrations_ = 0;
  std::uint64_t label_ = 0;
  StepReport last_;
  std::atomic<bool> paused_{false};
  std::filesystem::path export_dir_;

  // Command queue.
  mutable std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::vector<Pending> queue_;
  std::uint64_t next_boundary_ = 1;
  std::uint32_t next_sub_id_ = 1;
  int pending_subs_ = 0;
  std::set<GridId> pending_refines_;
  std::atomic<bool> stop_{false};

  // Published state.
  mutable std::mutex snap_mutex_;
  mutable std::condition_variable publish_cv_;
  std::shared_ptr<const SimSnapshot> main_snap_;
  std::map<std::uint32_t, std::shared_ptr<const SimSnapshot>> sub_snaps_;
  BoundarySpec published_bc_;
  std::string last_failure_;

  SimCounters counters_;
  std::thread thread_;
};

}  // namespace slwin

#endif
