#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "fairnav/envcore.hpp"
#include "fairnav/text.hpp"

namespace fairnav {

using text::format_double;

namespace {

constexpr std::string_view kScenarioMagic = "fairnav-scenario 1";
constexpr std::string_view kTraceMagic = "# fairnav-trace 1";

[[noreturn]] void bad_format(const std::string& what) {
  throw std::runtime_error("malformed file: " + what);
}

AgentStatus parse_status(std::string_view s) {
  if (s == "active") return AgentStatus::active;
  if (s == "at_goal") return AgentStatus::at_goal;
  if (s == "crashed") return AgentStatus::crashed;
  bad_format("unknown status '" + std::string(s) + "'");
}

}  // namespace

void write_scenario(std::ostream& os, const Scenario& sc) {
  os << kScenarioMagic << '\n'
     << "family " << to_string(sc.family) << '\n'
     << "agents " << sc.n_agents() << '\n'
     << "obstacles " << sc.n_obstacles << '\n'
     << "seed " << sc.seed << '\n'
     << "map_size " << format_double(sc.world.map_size) << '\n';
  for (const auto& c : sc.world.obstacles) {
    os << "obstacle " << format_double(c.cx) << ' ' << format_double(c.cy) << ' '
       << format_double(c.radius) << '\n';
  }
  for (int i = 0; i < sc.n_agents(); ++i) {
    const auto& s = sc.starts[static_cast<std::size_t>(i)];
    const auto& g = sc.goals[static_cast<std::size_t>(i)];
    os << "agent " << format_double(s.x) << ' ' << format_double(s.y) << ' '
       << format_double(s.theta) << ' ' << format_double(g.x) << ' ' << format_double(g.y)
       << '\n';
  }
}

Scenario read_scenario(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || text::trim(line) != kScenarioMagic) {
    bad_format("missing scenario header");
  }
  Scenario sc;
  int declared_agents = -1;
  while (std::getline(is, line)) {
    const auto f = text::split(line);
    if (f.empty() || f[0].starts_with('#')) continue;
    const auto key = f[0];
    auto need = [&](std::size_t n) {
      if (f.size() != n + 1) bad_format("wrong field count on '" + line + "'");
    };
    if (key == "family") {
      need(1);
      sc.family = parse_family(f[1]);
    } else if (key == "agents") {
      need(1);
      declared_agents = text::parse_int<int>(f[1]);
    } else if (key == "obstacles") {
      need(1);
      sc.n_obstacles = text::parse_int<int>(f[1]);
    } else if (key == "seed") {
      need(1);
      sc.seed = text::parse_int<std::uint64_t>(f[1]);
    } else if (key == "map_size") {
      need(1);
      sc.world.map_size = text::parse_double(f[1]);
    } else if (key == "obstacle") {
      need(3);
      sc.world.obstacles.push_back({text::parse_double(f[1]), text::parse_double(f[2]),
                                    text::parse_double(f[3])});
    } else if (key == "agent") {
      need(5);
      sc.starts.push_back({text::parse_double(f[1]), text::parse_double(f[2]),
                           text::parse_double(f[3])});
      sc.goals.push_back({text::parse_double(f[4]), text::parse_double(f[5])});
    } else {
      bad_format("unknown key '" + std::string(key) + "'");
    }
  }
  if (declared_agents != sc.n_agents()) bad_format("agent count mismatch");
  if (static_cast<int>(sc.world.obstacles.size()) != sc.n_obstacles) {
    bad_format("obstacle count mismatch");
  }
  return sc;
}

void save_scenario(const std::string& path, const Scenario& scenario) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_scenario(os, scenario);
}

Scenario load_scenario(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_scenario(is);
}

void write_trace(std::ostream& os, const Scenario& sc, std::span<const TraceRecord> records) {
  os << kTraceMagic << '\n' << "# map_size " << format_double(sc.world.map_size) << '\n';
  for (const auto& c : sc.world.obstacles) {
    os << "# obstacle " << format_double(c.cx) << ' ' << format_double(c.cy) << ' '
       << format_double(c.radius) << '\n';
  }
  for (std::size_t i = 0; i < sc.goals.size(); ++i) {
    os << "# goal " << i << ' ' << format_double(sc.goals[i].x) << ' '
       << format_double(sc.goals[i].y) << '\n';
  }
  os << "# t, agent_id, x, y, theta, f, v, w, r_hat, r_tilde, status\n";
  for (const auto& r : records) {
    os << r.t << ", " << r.agent << ", " << format_double(r.x) << ", " << format_double(r.y)
       << ", " << format_double(r.theta) << ", " << r.f << ", " << format_double(r.v) << ", "
       << format_double(r.w) << ", " << format_double(r.r_hat) << ", "
       << format_double(r.r_tilde) << ", " << to_string(r.status) << '\n';
  }
}

TraceFile read_trace(std::istream& is) {
  TraceFile tf;
  std::string line;
  if (!std::getline(is, line) || text::trim(line) != kTraceMagic) {
    bad_format("missing trace header");
  }
  while (std::getline(is, line)) {
    const auto body = text::trim(line);
    if (body.empty()) continue;
    if (body.starts_with('#')) {
      const auto f = text::split(body.substr(1));
      if (f.empty()) continue;
      if (f[0] == "map_size" && f.size() == 2) {
        tf.map_size = text::parse_double(f[1]);
      } else if (f[0] == "obstacle" && f.size() == 4) {
        tf.obstacles.push_back({text::parse_double(f[1]), text::parse_double(f[2]),
                                text::parse_double(f[3])});
      } else if (f[0] == "goal" && f.size() == 4) {
        const auto idx = text::parse_int<std::size_t>(f[1]);
        if (tf.goals.size() <= idx) tf.goals.resize(idx + 1);
        tf.goals[idx] = {text::parse_double(f[2]), text::parse_double(f[3])};
      }
      continue;
    }
    const auto f = text::split(body, ", ");
    if (f.size() != 11) bad_format("trace record needs 11 fields: '" + line + "'");
    TraceRecord r;
    r.t = text::parse_int<int>(f[0]);
    r.agent = text::parse_int<int>(f[1]);
    r.x = text::parse_double(f[2]);
    r.y = text::parse_double(f[3]);
    r.theta = text::parse_double(f[4]);
    r.f = text::parse_int<int>(f[5]);
    r.v = text::parse_double(f[6]);
    r.w = text::parse_double(f[7]);
    r.r_hat = text::parse_double(f[8]);
    r.r_tilde = text::parse_double(f[9]);
    r.status = parse_status(f[10]);
    tf.records.push_back(r);
  }
  return tf;
}

}  // namespace fairnav
