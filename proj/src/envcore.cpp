#include "fairnav/envcore.hpp"

#include <algorithm>
#include <cctype>
#include <string>

#include "fairnav/rng.hpp"

namespace fairnav {

namespace {

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() &&
         std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) ==
                  std::tolower(static_cast<unsigned char>(y));
         });
}

struct Box {
  double x0, y0, x1, y1;
};

Box corner_box(int q, double map_size) {
  const double s = 0.2 * map_size;
  switch (q) {
    case 0: return {0.0, 0.0, s, s};
    case 1: return {map_size - s, 0.0, map_size, s};
    case 2: return {map_size - s, map_size - s, map_size, map_size};
    default: return {0.0, map_size - s, s, map_size};
  }
}

Box shrink(Box b, double margin, double map_size) {
  return {std::max(b.x0, margin), std::max(b.y0, margin),
          std::min(b.x1, map_size - margin), std::min(b.y1, map_size - margin)};
}

}  // namespace

std::string_view to_string(Family family) {
  return family == Family::uniform ? "Uniform" : "Corner";
}

Family parse_family(std::string_view text) {
  if (iequals(text, "uniform")) return Family::uniform;
  if (iequals(text, "corner")) return Family::corner;
  throw std::invalid_argument("unknown scenario family: " + std::string(text));
}

std::string_view to_string(AgentStatus status) {
  switch (status) {
    case AgentStatus::active: return "active";
    case AgentStatus::at_goal: return "at_goal";
    case AgentStatus::crashed: return "crashed";
  }
  return "active";
}

std::string_view to_string(SolitaryMode mode) {
  return mode == SolitaryMode::removed ? "removed" : "frozen";
}

SolitaryMode parse_solitary_mode(std::string_view text) {
  if (iequals(text, "removed")) return SolitaryMode::removed;
  if (iequals(text, "frozen")) return SolitaryMode::frozen;
  throw std::invalid_argument("unknown solitary mode: " + std::string(text));
}

std::string_view to_string(FailureCause cause) {
  switch (cause) {
    case FailureCause::none: return "none";
    case FailureCause::crash: return "crash";
    case FailureCause::timeout: return "timeout";
  }
  return "none";
}

int corner_region(Vec2 p, double map_size) {
  for (int q = 0; q < 4; ++q) {
    const Box b = corner_box(q, map_size);
    if (p.x >= b.x0 && p.x <= b.x1 && p.y >= b.y0 && p.y <= b.y1) return q;
  }
  return -1;
}

Scenario generate_scenario(Family family, int n_agents, int n_obstacles,
                           std::uint64_t seed, double map_size) {
  if (n_agents < 1 || n_agents > 32) {
    throw std::invalid_argument("generate_scenario: n_agents must be in [1, 32]");
  }
  if (n_obstacles < 0) {
    throw std::invalid_argument("generate_scenario: n_obstacles must be >= 0");
  }
  const Limits lim{map_size};
  const double r = lim.robot_radius();
  const double goal_margin = lim.goal_radius() + r;
  const double goal_separation = 2.0 * goal_margin;

  Rng rng{seed, 0x5ce7a210ULL};
  int rejections = 0;
  auto sample_in = [&](Box b) {
    return Vec2{rng.uniform(b.x0, b.x1), rng.uniform(b.y0, b.y1)};
  };

  // A layout whose obstacles leave no room for some agent is redrawn whole
  // after kLayoutBudget rejections; the global cap still bounds the work.
  constexpr int kLayoutBudget = 1000;
  for (;;) {
    Scenario sc;
    sc.family = family;
    sc.n_obstacles = n_obstacles;
    sc.seed = seed;
    sc.world.map_size = map_size;
    for (int k = 0; k < n_obstacles; ++k) {
      const double cx = rng.uniform(0.0, map_size);
      const double cy = rng.uniform(0.0, map_size);
      const double rad = rng.uniform(0.05 * map_size, 0.08 * map_size);
      sc.world.obstacles.push_back({cx, cy, rad});
    }

    // Balanced corner assignment, shuffled.
    std::vector<int> corners(static_cast<std::size_t>(n_agents));
    for (int i = 0; i < n_agents; ++i) corners[i] = i % 4;
    for (int i = n_agents - 1; i > 0; --i) {
      const auto j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(corners[i], corners[j]);
    }

    int layout_rejections = 0;
    // Returns false once this layout has used up its budget.
    auto reject = [&] {
      if (++rejections > kMaxGenerationAttempts) {
        throw GenerationFailed("scenario generation exceeded " +
                               std::to_string(kMaxGenerationAttempts) +
                               " rejections (seed " + std::to_string(seed) + ")");
      }
      return ++layout_rejections < kLayoutBudget;
    };

    bool placed = true;
    for (int i = 0; i < n_agents && placed; ++i) {
      Box goal_box{goal_margin, goal_margin, map_size - goal_margin, map_size - goal_margin};
      Box start_box{r, r, map_size - r, map_size - r};
      if (family == Family::corner) {
        start_box = shrink(corner_box(corners[i], map_size), r, map_size);
        goal_box = shrink(corner_box((corners[i] + 2) % 4, map_size), goal_margin, map_size);
      }

      Vec2 goal;
      for (;;) {
        goal = sample_in(goal_box);
        bool ok = std::all_of(sc.world.obstacles.begin(), sc.world.obstacles.end(),
                              [&](const Circle& c) {
                                return (goal - c.center()).norm() >= c.radius + goal_margin;
                              }) &&
                  std::all_of(sc.goals.begin(), sc.goals.end(), [&](const Vec2& g) {
                    return (goal - g).norm() >= goal_separation;
                  });
        if (ok) break;
        if (!reject()) {
          placed = false;
          break;
        }
      }
      if (!placed) break;

      Pose start;
      for (;;) {
        const Vec2 p = sample_in(start_box);
        const Vec2 d = goal - p;
        start = {p.x, p.y, normalize_angle(std::atan2(d.y, d.x))};
        if (d.norm() > lim.goal_radius() &&
            check_crash(start, sc.world, sc.starts) == CrashKind::none) {
          break;
        }
        if (!reject()) {
          placed = false;
          break;
        }
      }
      if (!placed) break;
      sc.goals.push_back(goal);
      sc.starts.push_back(start);
    }
    if (placed) return sc;
  }
}

std::vector<AgentState> initial_states(const Scenario& scenario) {
  std::vector<AgentState> states;
  states.reserve(scenario.starts.size());
  for (const auto& p : scenario.starts) states.push_back({p, AgentStatus::active, {}});
  return states;
}

StepResult env_step(const WorldMap& world, std::span<const Vec2> goals,
                    std::span<const AgentState> states,
                    std::span<const Action> joint_action, int t,
                    const RewardConstants& rewards) {
  const std::size_t n = states.size();
  if (joint_action.size() != n || goals.size() != n) {
    throw std::invalid_argument("env_step: size mismatch");
  }
  const Limits lim{world.map_size};
  StepResult res;
  res.next.assign(states.begin(), states.end());
  res.rewards.assign(n, 0.0);
  res.done.assign(n, false);
  res.crashes.assign(n, CrashKind::none);

  for (std::size_t i = 0; i < n; ++i) {
    if (states[i].active()) res.next[i].pose = step_kinematics(states[i].pose, joint_action[i]);
  }

  std::vector<Pose> others;
  others.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!states[i].active()) {
      res.done[i] = true;
      continue;
    }
    others.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) others.push_back(res.next[j].pose);
    }
    const CrashKind crash = check_crash(res.next[i].pose, world, others);
    res.crashes[i] = crash;
    if (crash != CrashKind::none) {
      res.next[i].status = AgentStatus::crashed;
      res.rewards[i] = -rewards.crash - rewards.time;
      res.done[i] = true;
    } else if ((res.next[i].pose.position() - goals[i]).norm() <= lim.goal_radius()) {
      res.next[i].status = AgentStatus::at_goal;
      res.next[i].goal_time = t + 1;
      res.rewards[i] = rewards.goal - rewards.time;
      res.done[i] = true;
    } else {
      res.rewards[i] = -rewards.time;
    }
  }
  return res;
}

std::vector<int> neighbors(std::span<const AgentState> states, int i, double range) {
  std::vector<int> out;
  const Vec2 p = states[static_cast<std::size_t>(i)].pose.position();
  for (std::size_t j = 0; j < states.size(); ++j) {
    if (static_cast<int>(j) == i || !states[j].active()) continue;
    if ((states[j].pose.position() - p).norm() <= range) out.push_back(static_cast<int>(j));
  }
  return out;
}

Observation observe(const WorldMap& world, std::span<const AgentState> states,
                    int i, Vec2 goal, const DwaConfig& dwa) {
  const Limits lim{world.map_size};
  std::vector<Circle> bodies;
  bodies.reserve(states.size());
  for (std::size_t j = 0; j < states.size(); ++j) {
    if (static_cast<int>(j) == i) continue;
    bodies.push_back({states[j].pose.x, states[j].pose.y, lim.robot_radius()});
  }
  const Pose& pose = states[static_cast<std::size_t>(i)].pose;
  const LidarScan raw = lidar_scan(pose, world, bodies);
  const auto pts = lidar_points(pose, raw, lim.lidar_range());

  Observation obs;
  obs.pose = pose;
  for (int k = 0; k < kLidarBeams; ++k) obs.lidar[k] = raw[k] / lim.lidar_range();
  obs.goal_disp = (goal - pose.position()) * (1.0 / world.map_size);
  obs.dwa_suggestion = dwa_suggest(pose, pts, goal, world.map_size, dwa);
  return obs;
}

ObservationFeatures observation_features(const Observation& obs, double map_size) {
  const Limits lim{map_size};
  ObservationFeatures f{};
  std::size_t k = 0;
  f[k++] = static_cast<float>(obs.pose.x / map_size);
  f[k++] = static_cast<float>(obs.pose.y / map_size);
  f[k++] = static_cast<float>(std::cos(obs.pose.theta));
  f[k++] = static_cast<float>(std::sin(obs.pose.theta));
  for (double r : obs.lidar) f[k++] = static_cast<float>(r);
  f[k++] = static_cast<float>(obs.goal_disp.x);
  f[k++] = static_cast<float>(obs.goal_disp.y);
  f[k++] = static_cast<float>(obs.dwa_suggestion.v / lim.v_max());
  f[k++] = static_cast<float>(obs.dwa_suggestion.w / Limits::w_max());
  return f;
}

int solitary_rollout(const Scenario& scenario, int i, const SolitaryPolicy& policy,
                     SolitaryMode mode, const DwaConfig& dwa, int t_max) {
  const Limits lim{scenario.world.map_size};
  WorldMap world = scenario.world;
  if (mode == SolitaryMode::frozen) {
    // Static bodies of radius r give the same 2r contact distance as agents.
    for (int j = 0; j < scenario.n_agents(); ++j) {
      if (j == i) continue;
      const Pose& p = scenario.starts[static_cast<std::size_t>(j)];
      world.obstacles.push_back({p.x, p.y, lim.robot_radius()});
    }
  }
  const Vec2 goal = scenario.goals[static_cast<std::size_t>(i)];
  std::vector<AgentState> states{{scenario.starts[static_cast<std::size_t>(i)],
                                  AgentStatus::active, {}}};
  const std::array<Vec2, 1> goals{goal};
  for (int t = 0; t < t_max; ++t) {
    const Observation obs = observe(world, states, 0, goal, dwa);
    const Action a = clamp_action(policy(obs, goal), lim);
    const std::array<Action, 1> joint{a};
    auto res = env_step(world, goals, states, joint, t);
    states = std::move(res.next);
    if (states[0].status == AgentStatus::at_goal) return *states[0].goal_time;
    if (states[0].status == AgentStatus::crashed) {
      throw SolitaryTimeout("solitary rollout of agent " + std::to_string(i) +
                            " crashed at t=" + std::to_string(t + 1));
    }
  }
  throw SolitaryTimeout("solitary rollout of agent " + std::to_string(i) +
                        " did not reach its goal within " + std::to_string(t_max) + " steps");
}

int EpisodeResult::makespan() const {
  int ms = 0;
  for (const auto& g : goal_times) {
    if (g) ms = std::max(ms, *g);
  }
  return ms;
}

EpisodeResult summarize_episode(std::span<const AgentState> final_states,
                                std::vector<TraceRecord> trace, int t_max) {
  EpisodeResult res;
  res.trace = std::move(trace);
  bool crashed = false;
  bool all_goal = true;
  for (const auto& s : final_states) {
    res.goal_times.push_back(s.goal_time);
    if (s.status == AgentStatus::crashed) crashed = true;
    if (s.status != AgentStatus::at_goal || !s.goal_time || *s.goal_time > t_max) {
      all_goal = false;
    }
  }
  res.success = all_goal && !crashed;
  res.failure = res.success ? FailureCause::none
                            : (crashed ? FailureCause::crash : FailureCause::timeout);
  return res;
}

}  // namespace fairnav
