#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "slwin/gateway.hpp"
#include "slwin/vtk.hpp"

using namespace slwin;

namespace {

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

/// "x0,y0,x1,y1" spans every z; "x0,y0,z0,x1,y1,z1" is a full box.
Box parse_bbox(const std::string& s) {
  const auto v = parse_list(s);
  if (v.size() == 4) return {{v[0], v[1], -1e300}, {v[2], v[3], 1e300}};
  if (v.size() == 6) return {{v[0], v[1], v[2]}, {v[3], v[4], v[5]}};
  throw ConfigError("bbox takes 4 or 6 comma-separated numbers");
}

Vec3 parse_vec(const std::string& s) {
  auto v = parse_list(s);
  v.resize(3, 0.0);
  return {v[0], v[1], v[2]};
}

std::uint16_t resolve_port(int flag) {
  if (const char* env = std::getenv("SLWN_PORT")) return static_cast<std::uint16_t>(std::stoi(env));
  return static_cast<std::uint16_t>(flag);
}

SimConfig load_or_default(const std::string& path) { return path.empty() ? cavity_config() : load_config(path); }

void print_table(const CellStream& cs, std::ostream& os) {
  os << "# quantity=" << quantity_name(cs.quantity) << " cells=" << cs.cells.size()
     << " version=" << cs.version << " step=" << cs.step << " time=" << cs.time << "\n";
  os << "cx cy cz wx wy wz level";
  for (int i = 0; i < cs.arity(); ++i) os << " v" << i;
  os << "\n" << std::setprecision(10);
  for (const auto& c : cs.cells) {
    os << c.center[0] << ' ' << c.center[1] << ' ' << c.center[2] << ' ' << c.width[0] << ' '
       << c.width[1] << ' ' << c.width[2] << ' ' << int(c.level);
    for (int i = 0; i < cs.arity(); ++i) os << ' ' << c.values[i];
    os << "\n";
  }
}

void write_bytes(const std::string& path, std::span<const std::uint8_t> b) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::atomic<bool> g_stop{false};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slwin: steerable sliding-window flow server and client"};
  app.require_subcommand(1);

  std::string host = "127.0.0.1";
  int port = 7070;
  std::string config_path;

  // serve
  auto* serve = app.add_subcommand("serve", "run the simulation and listen for clients");
  int ws_port = 7071;
  std::string ui_dir, export_dir;
  int max_subs = -1;
  bool start_paused = false;
  serve->add_option("--port", port, "binary protocol port");
  serve->add_option("--ws-port", ws_port, "HTTP/WebSocket port (0 disables)");
  serve->add_option("--ui-dir", ui_dir, "static UI bundle served over HTTP");
  serve->add_option("--config", config_path, "simulation config JSON");
  serve->add_option("--export-dir", export_dir, "dump the default stream here every export_every steps");
  serve->add_option("--max-subs", max_subs, "maximum concurrent sub-simulations");
  serve->add_flag("--paused", start_paused, "start paused");

  // client verbs share connection options
  auto add_conn = [&](CLI::App* c) {
    c->add_option("--host", host, "server host");
    c->add_option("--port", port, "server port");
  };

  auto* query = app.add_subcommand("query", "fetch one window and print it as a table");
  std::string bbox = "0,0,1,1", quantity = "pressure", out_cells, out_vtk;
  std::uint32_t max_cells = 400, sim_id = 0;
  add_conn(query);
  auto add_window = [&](CLI::App* c) {
    c->add_option("--bbox", bbox, "x0,y0,x1,y1 or x0,y0,z0,x1,y1,z1");
    c->add_option("--max-cells", max_cells, "cell budget");
    c->add_option("--quantity", quantity, "velocity | pressure | velocity_magnitude");
    c->add_option("--sim", sim_id, "sub-simulation id (0 = main)");
  };
  add_window(query);
  query->add_option("--out", out_cells, "also save the raw CellStream payload");
  query->add_option("--vtk", out_vtk, "also write a VTK file");

  auto* watch = app.add_subcommand("watch", "poll a window at a fixed rate");
  double hz = 2.0, duration = 5.0;
  add_conn(watch);
  add_window(watch);
  watch->add_option("--hz", hz, "queries per second");
  watch->add_option("--duration", duration, "seconds");

  auto* metrics = app.add_subcommand("metrics", "print server metrics JSON");
  add_conn(metrics);

  auto* steer = app.add_subcommand("steer", "send a steering command");
  add_conn(steer);
  steer->require_subcommand(1);
  std::string face = "+y", kind = "moving_wall", velocity = "0,0,0", region = "0,0,1,1", cell_type = "solid";
  long long grid = -1;
  double value = 0.0;
  int depth = 1;
  auto* st_bc = steer->add_subcommand("boundary", "change the condition on one domain face");
  st_bc->add_option("--face", face, "-x +x -y +y -z +z");
  st_bc->add_option("--kind", kind, "no_slip | moving_wall | inflow | outflow");
  st_bc->add_option("--velocity", velocity, "vx,vy,vz");
  auto* st_refine = steer->add_subcommand("refine", "refine one grid or every leaf in a region");
  st_refine->add_option("--grid", grid, "grid id");
  st_refine->add_option("--bbox", region, "region");
  auto* st_cell = steer->add_subcommand("cell-type", "mark a region solid or fluid");
  st_cell->add_option("--bbox", region, "region");
  st_cell->add_option("--type", cell_type, "solid | fluid");
  auto* st_nu = steer->add_subcommand("viscosity", "set the kinematic viscosity");
  st_nu->add_option("--value", value)->required();
  auto* st_pause = steer->add_subcommand("pause", "stop integrating");
  auto* st_resume = steer->add_subcommand("resume", "continue integrating");
  auto* st_spawn = steer->add_subcommand("spawn", "start a finer sub-simulation over a box");
  st_spawn->add_option("--bbox", region, "region");
  st_spawn->add_option("--depth", depth, "levels finer than the covered leaves");
  for (auto* s : steer->get_subcommands({})) s->fallthrough();

  auto* vtk = app.add_subcommand("export-vtk", "write a CellStream as legacy VTK");
  std::string in_cells;
  add_conn(vtk);
  add_window(vtk);
  vtk->add_option("--in", in_cells, "saved CellStream payload (otherwise query the server)");
  vtk->add_option("--out", out_vtk, "output .vtk")->required();

  auto* run = app.add_subcommand("run", "integrate offline and log metrics");
  int steps = 100;
  std::string csv, dump_dir;
  run->add_option("--config", config_path, "simulation config JSON");
  run->add_option("--steps", steps, "number of steps");
  run->add_option("--metrics-csv", csv, "per-step CSV log (default stdout)");
  run->add_option("--dump-dir", dump_dir, "write per-grid VTK structured points at the end");

  auto* sel = app.add_subcommand("select", "print the offline selection for a window");
  sel->add_option("--config", config_path, "simulation config JSON");
  add_window(sel);

  auto* topo = app.add_subcommand("topology", "print the grid topology JSON");
  topo->add_option("--config", config_path, "simulation config JSON");

  auto* fixtures = app.add_subcommand("fixtures", "write golden protocol fixtures");
  std::string fixture_dir = "fixtures";
  fixtures->add_option("--out", fixture_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  auto window = [&]() {
    proto::WindowRequest r;
    r.query.bbox = parse_bbox(bbox);
    r.query.max_cells = max_cells;
    r.query.quantity = parse_quantity(quantity);
    r.sim_id = sim_id;
    return r;
  };

  try {
    if (*serve) {
      SimConfig cfg = load_or_default(config_path);
      if (max_subs >= 0) cfg.max_subs = max_subs;
      Simulation sim(cfg);
      if (!export_dir.empty()) sim.set_export_dir(export_dir);
      if (start_paused) {
        proto::SteerCommand pause;
        pause.kind = proto::SteerKind::pause;
        sim.submit(pause);
      }
      TcpServer tcp(sim);
      tcp.start(resolve_port(port));
      std::unique_ptr<Gateway> gw;
      if (ws_port > 0) {
        gw = std::make_unique<Gateway>(sim, ui_dir);
        gw->start(static_cast<std::uint16_t>(ws_port));
      }
      sim.start();
      std::cerr << "slwin: protocol on port " << tcp.port();
      if (gw) std::cerr << ", http/websocket on port " << gw->port();
      std::cerr << std::endl;
      std::signal(SIGINT, [](int) { g_stop = true; });
      std::signal(SIGTERM, [](int) { g_stop = true; });
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      sim.stop();
      if (gw) gw->stop();
      tcp.stop();
      return 0;
    }
    if (*query) {
      Client c(host, resolve_port(port));
      const auto r = window();
      const auto f = c.call({'V', proto::encode_window_request(r)});
      if (f.kind() == proto::Command::error) throw Error(proto::decode_error(f.payload).message);
      const CellStream cs = proto::decode_cell_stream(f.payload);
      if (!out_cells.empty()) write_bytes(out_cells, f.payload);
      if (!out_vtk.empty()) {
        std::ofstream os(out_vtk);
        write_vtk_cells(cs, os);
      }
      print_table(cs, std::cout);
      c.quit();
      return 0;
    }
    if (*watch) {
      if (!(hz > 0.0)) throw Error("--hz must be positive");
      Client c(host, resolve_port(port));
      const auto r = window();
      const auto period = std::chrono::duration<double>(1.0 / hz);
      const int count = static_cast<int>(std::floor(duration * hz + 1e-9));
      const auto t0 = std::chrono::steady_clock::now();
      int over = 0;
      for (int i = 0; i < count; ++i) {
        std::this_thread::sleep_until(t0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(period * i));
        const CellStream cs = c.query(r);
        std::size_t levels[256] = {};
        for (const auto& cell : cs.cells) ++levels[cell.level];
        std::cout << "stream " << i << " step " << cs.step << " time " << cs.time << " cells "
                  << cs.cells.size() << " levels";
        for (int l = 0; l < 256; ++l)
          if (levels[l]) std::cout << ' ' << l << ':' << levels[l];
        std::cout << std::endl;
        if (cs.cells.size() > r.query.max_cells) ++over;
      }
      c.quit();
      if (over) {
        std::cerr << over << " streams exceeded the budget\n";
        return 1;
      }
      return 0;
    }
    if (*metrics) {
      Client c(host, resolve_port(port));
      std::cout << c.metrics().dump(2) << "\n";
      c.quit();
      return 0;
    }
    if (*steer) {
      proto::SteerCommand cmd;
      if (*st_bc) {
        cmd.kind = proto::SteerKind::set_boundary;
        cmd.face = parse_face(face);
        cmd.wall.kind = parse_wall_kind(kind);
        cmd.wall.velocity = parse_vec(velocity);
      } else if (*st_refine) {
        cmd.kind = proto::SteerKind::refine;
        if (grid >= 0)
          cmd.grid = static_cast<GridId>(grid);
        else
          cmd.region = parse_bbox(region);
      } else if (*st_cell) {
        cmd.kind = proto::SteerKind::set_cell_type;
        cmd.region = parse_bbox(region);
        if (cell_type != "solid" && cell_type != "fluid") throw Error("--type is solid or fluid");
        cmd.cell_type = cell_type == "solid" ? CellType::solid : CellType::fluid;
      } else if (*st_nu) {
        cmd.kind = proto::SteerKind::set_viscosity;
        cmd.value = value;
      } else if (*st_pause) {
        cmd.kind = proto::SteerKind::pause;
      } else if (*st_resume) {
        cmd.kind = proto::SteerKind::resume;
      } else if (*st_spawn) {
        cmd.kind = proto::SteerKind::spawn_sub;
        cmd.region = parse_bbox(region);
        cmd.depth = depth;
      }
      Client c(host, resolve_port(port));
      const auto ack = c.steer(cmd);
      std::cout << "applies at step " << ack.apply_step;
      if (ack.sub_id) std::cout << ", sub-simulation " << ack.sub_id;
      std::cout << "\n";
      c.quit();
      return 0;
    }
    if (*vtk) {
      CellStream cs;
      if (!in_cells.empty()) {
        cs = proto::decode_cell_stream(read_bytes(in_cells));
      } else {
        Client c(host, resolve_port(port));
        cs = c.query(window());
        c.quit();
      }
      std::ofstream os(out_vtk);
      if (!os) throw Error("cannot write " + out_vtk);
      write_vtk_cells(cs, os);
      std::cout << "wrote " << cs.cells.size() << " cells to " << out_vtk << "\n";
      return 0;
    }
    if (*run) {
      const SimConfig cfg = load_or_default(config_path);
      Forest f = build_forest(cfg);
      const auto model = make_boundary_model(cfg.boundary, f.active_axes());
      DirectPoisson cache;
      std::ofstream file;
      if (!csv.empty()) file.open(csv);
      MetricsLog log(csv.empty() ? std::cout : file);
      double t = 0.0;
      for (int s = 0; s < steps; ++s) {
        const auto rep = step(f, cfg.fluid, model, &cache);
        t += rep.dt;
        log.record(t, rep);
      }
      if (!dump_dir.empty()) {
        std::filesystem::create_directories(dump_dir);
        for (GridId id : f.leaves()) {
          std::ofstream os(std::filesystem::path(dump_dir) / ("grid_" + std::to_string(id) + ".vtk"));
          write_vtk_structured_points(f.node(id), os);
        }
      }
      return 0;
    }
    if (*sel) {
      const Forest f = build_forest(load_or_default(config_path));
      auto r = window();
      std::cout << select(f, r.query).to_json().dump(2) << "\n";
      return 0;
    }
    if (*topo) {
      const Forest f = build_forest(load_or_default(config_path));
      std::cout << f.topology().to_json().dump(2) << "\n";
      return 0;
    }
    if (*fixtures) {
      std::filesystem::create_directories(fixture_dir);
      const auto hs = proto::handshake_bytes();
      write_bytes(fixture_dir + "/handshake.bin", hs);
      Simulation sim(cavity_config());
      for (int i = 0; i < 20; ++i) sim.advance();
      nlohmann::json index = nlohmann::json::array();
      auto emit = [&](const std::string& name, const Box& b, std::uint32_t budget, StreamQuantity q) {
        proto::WindowRequest r;
        r.query = {b, budget, q};
        const CellStream cs = sim.query(r);
        const proto::Frame f{'V', proto::encode_cell_stream(cs)};
        write_bytes(fixture_dir + "/" + name + ".frame", proto::encode_frame(f));
        std::ofstream js(fixture_dir + "/" + name + ".json");
        nlohmann::json cells = nlohmann::json::array();
        for (const auto& c : cs.cells)
          cells.push_back({{"center", c.center}, {"width", c.width}, {"level", c.level},
                           {"values", std::vector<double>(c.values.begin(), c.values.begin() + cs.arity())}});
        js << nlohmann::json{{"quantity", quantity_name(cs.quantity)}, {"version", cs.version},
                             {"time", cs.time}, {"step", cs.step}, {"cells", cells}}
                  .dump(1)
           << "\n";
        index.push_back({{"name", name}, {"cells", cs.cells.size()}, {"budget", budget}});
      };
      emit("full_400_pressure", {{0, 0, 0}, {1, 1, 1}}, 400, StreamQuantity::pressure);
      emit("quarter_400_velocity", {{0, 0.75, 0}, {0.25, 1, 1}}, 400, StreamQuantity::velocity);
      emit("two_level_magnitude", {{0, 0.5, 0}, {0.6, 1, 1}}, 400, StreamQuantity::velocity_magnitude);
      emit("empty", {{2, 2, 0}, {3, 3, 1}}, 400, StreamQuantity::pressure);
      std::ofstream(fixture_dir + "/index.json") << index.dump(2) << "\n";
      std::cout << "wrote " << index.size() << " stream fixtures to " << fixture_dir << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "slwin: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
