#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "fairnav/config.hpp"
#include "fairnav/evaluate.hpp"

namespace py = pybind11;
using namespace fairnav;

namespace {

using PoseTuple = std::tuple<double, double, double>;
using CircleTuple = std::tuple<double, double, double>;

Pose to_pose(const PoseTuple& p) { return {std::get<0>(p), std::get<1>(p), std::get<2>(p)}; }
PoseTuple from_pose(const Pose& p) { return {p.x, p.y, p.theta}; }

std::vector<Circle> to_circles(const std::vector<CircleTuple>& cs) {
  std::vector<Circle> out;
  for (const auto& [x, y, r] : cs) out.push_back({x, y, r});
  return out;
}

py::dict trace_record(const TraceRecord& r) {
  py::dict d;
  d["t"] = r.t;
  d["agent"] = r.agent;
  d["x"] = r.x;
  d["y"] = r.y;
  d["theta"] = r.theta;
  d["f"] = r.f;
  d["v"] = r.v;
  d["w"] = r.w;
  d["r_hat"] = r.r_hat;
  d["r_tilde"] = r.r_tilde;
  d["status"] = std::string(to_string(r.status));
  return d;
}

}  // namespace

PYBIND11_MODULE(_fairnav, m) {
  m.doc() = "Fair multi-agent navigation: environment, DWA, policies, evaluation.";

  m.def("step_kinematics",
        [](const PoseTuple& pose, double v, double w) { return from_pose(step_kinematics(to_pose(pose), {v, w})); },
        py::arg("pose"), py::arg("v"), py::arg("w"), "Exact unicycle step; returns (x, y, theta).");

  m.def("lidar_scan",
        [](const PoseTuple& pose, const std::vector<CircleTuple>& obstacles,
           const std::vector<CircleTuple>& others, double map_size) {
          WorldMap world{map_size, to_circles(obstacles)};
          const auto bodies = to_circles(others);
          const LidarScan s = lidar_scan(to_pose(pose), world, bodies);
          return std::vector<double>(s.begin(), s.end());
        },
        py::arg("pose"), py::arg("obstacles"), py::arg("others") = std::vector<CircleTuple>{},
        py::arg("map_size") = 128.0, "64 beam ranges in world units.");

  m.def("dwa_suggest",
        [](const PoseTuple& pose, const std::vector<std::pair<double, double>>& points,
           std::pair<double, double> goal, double map_size) {
          std::vector<Vec2> pts;
          for (const auto& [x, y] : points) pts.push_back({x, y});
          const Action a = dwa_suggest(to_pose(pose), pts, {goal.first, goal.second}, map_size, DwaConfig{});
          return std::make_pair(a.v, a.w);
        },
        py::arg("pose"), py::arg("points"), py::arg("goal"), py::arg("map_size") = 128.0,
        "DWA action (v, w) against point obstacles.");

  py::class_<Scenario>(m, "Scenario")
      .def_property_readonly("map_size", [](const Scenario& s) { return s.world.map_size; })
      .def_property_readonly("obstacles", [](const Scenario& s) {
        std::vector<CircleTuple> out;
        for (const auto& c : s.world.obstacles) out.emplace_back(c.cx, c.cy, c.radius);
        return out;
      })
      .def_property_readonly("starts", [](const Scenario& s) {
        std::vector<PoseTuple> out;
        for (const auto& p : s.starts) out.push_back(from_pose(p));
        return out;
      })
      .def_property_readonly("goals", [](const Scenario& s) {
        std::vector<std::pair<double, double>> out;
        for (const auto& g : s.goals) out.emplace_back(g.x, g.y);
        return out;
      })
      .def_property_readonly("family", [](const Scenario& s) { return std::string(to_string(s.family)); })
      .def_property_readonly("seed", [](const Scenario& s) { return s.seed; })
      .def("to_text", [](const Scenario& s) {
        std::ostringstream os;
        write_scenario(os, s);
        return os.str();
      })
      .def_static("from_text", [](const std::string& text) {
        std::istringstream is(text);
        return read_scenario(is);
      })
      .def("__eq__", [](const Scenario& a, const Scenario& b) { return a == b; });

  m.def("generate_scenario",
        [](const std::string& family, int agents, int obstacles, std::uint64_t seed, double map_size) {
          return generate_scenario(parse_family(family), agents, obstacles, seed, map_size);
        },
        py::arg("family") = "Uniform", py::arg("agents") = 2, py::arg("obstacles") = 25,
        py::arg("seed") = 1, py::arg("map_size") = 128.0);

  m.def("relative_patience",
        [](const std::vector<double>& rho, int i, int j, const std::vector<int>& nbrs) {
          return relative_patience(rho, i, j, nbrs);
        },
        py::arg("rho"), py::arg("i"), py::arg("j"), py::arg("nbrs"));

  m.def("fairness_efficiency_reward",
        [](int f, const std::vector<double>& rho, int i, const std::vector<double>& xi,
           const std::vector<int>& nbrs, double alpha, double beta) {
          return fairness_efficiency_reward(f, rho, i, xi, nbrs, {alpha, beta});
        },
        py::arg("f"), py::arg("rho"), py::arg("i"), py::arg("xi"), py::arg("nbrs"),
        py::arg("alpha") = 0.5, py::arg("beta") = 0.1);

  m.def("delay_stats",
        [](const std::vector<double>& delays) {
          const DelayStats s = delay_stats(delays);
          py::dict d;
          d["VD"] = s.vd;
          d["MAXD"] = s.maxd;
          d["MEAND"] = s.meand;
          return d;
        },
        py::arg("delays"));

  py::class_<PolicyBundle>(m, "PolicyBundle")
      .def(py::init([](std::uint64_t seed, int hidden, int head, int key_dim) {
             BundleConfig c;
             c.hidden = hidden;
             c.head = head;
             c.key_dim = key_dim;
             return PolicyBundle(c, seed);
           }),
           py::arg("seed") = 0, py::arg("hidden") = 256, py::arg("head") = 24, py::arg("key_dim") = 24,
           "Freshly initialized policy: behaves like DWA until trained.")
      .def("save", [](const PolicyBundle& b, const std::string& path) { save_bundle(path, b); })
      .def_property_readonly("hidden", [](const PolicyBundle& b) { return b.config.hidden; });

  m.def("load_bundle", &load_bundle, py::arg("path"));

  m.def("rollout",
        [](const PolicyBundle& bundle, const Scenario& scenario, const std::string& controller,
           std::uint64_t seed, bool stochastic, int t_max) {
          const PolicyRunner runner(bundle, Limits{scenario.world.map_size}, 0.2);
          EpisodeOptions opt;
          opt.protocol.controller = parse_controller(controller);
          opt.protocol.deterministic = !stochastic;
          opt.t_max = t_max;
          opt.key = {seed, 0};
          EpisodeResult r;
          {
            py::gil_scoped_release release;
            r = run_episode(runner, scenario, opt);
          }
          py::dict d;
          d["success"] = r.success;
          d["failure"] = std::string(to_string(r.failure));
          d["goal_times"] = r.goal_times;
          py::list rows;
          for (const auto& rec : r.trace) rows.append(trace_record(rec));
          d["trace"] = rows;
          return d;
        },
        py::arg("bundle"), py::arg("scenario"), py::arg("controller") = "ncf2", py::arg("seed") = 1,
        py::arg("stochastic") = false, py::arg("t_max") = kDefaultTMax);

  m.def("evaluate_json",
        [](const PolicyBundle& bundle, const std::string& family, int agents, int obstacles, int episodes,
           std::uint64_t seed, const std::string& controller, const std::string& delay_baseline,
           bool no_improvement, bool full_comm, bool fixed_priority, int workers) {
          EvalSettings s;
          s.family = parse_family(family);
          s.n_agents = agents;
          s.n_obstacles = obstacles;
          s.n_episodes = episodes;
          s.seed = seed;
          s.controller = parse_controller(controller);
          s.delay_mode = parse_solitary_mode(delay_baseline);
          s.ablations = {no_improvement, full_comm, fixed_priority};
          s.workers = workers;
          py::gil_scoped_release release;
          return report_json(evaluate(bundle, s));
        },
        py::arg("bundle"), py::arg("family") = "Uniform", py::arg("agents") = 2, py::arg("obstacles") = 25,
        py::arg("episodes") = 100, py::arg("seed") = 1, py::arg("controller") = "ncf2",
        py::arg("delay_baseline") = "removed", py::arg("no_improvement") = false, py::arg("full_comm") = false,
        py::arg("fixed_priority") = false, py::arg("workers") = 1);

  m.def("train",
        [](const std::map<std::string, std::string>& settings) {
          ConfigMap map;
          for (const auto& [k, v] : settings) map.set(k, v);
          const PipelineConfig config = pipeline_config(map);
          PipelineResult r;
          {
            py::gil_scoped_release release;
            r = run_pipeline(config);
          }
          return py::make_tuple(std::move(r.bundle), r.log_lines);
        },
        py::arg("settings") = std::map<std::string, std::string>{},
        "Runs all three training phases with `section.key` overrides; returns (bundle, log lines).");

  m.def("render_svg", [](const std::string& trace_text) {
    std::istringstream is(trace_text);
    return render_svg(read_trace(is));
  });

  py::register_exception<GenerationFailed>(m, "GenerationFailed", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
}
