#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fairnav/dwa.hpp"
#include "fairnav/geom2d.hpp"

namespace fairnav {

enum class Family { uniform, corner };

std::string_view to_string(Family family);
/// Accepts "Uniform" / "Corner" (case-insensitive).
Family parse_family(std::string_view text);

inline constexpr int kDefaultTMax = 100;
inline constexpr int kMaxGenerationAttempts = 10'000;

struct Scenario {
  WorldMap world;
  std::vector<Pose> starts;
  std::vector<Vec2> goals;
  Family family{Family::uniform};
  int n_obstacles{0};
  std::uint64_t seed{0};

  int n_agents() const { return static_cast<int>(starts.size()); }
  bool operator==(const Scenario&) const = default;
};

class GenerationFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic rejection sampler. Obstacle radii are drawn from
/// [0.05, 0.08] * map_size; goal centers are kept 2 * (goal_radius +
/// robot_radius) apart and their regions clear of obstacles. Corner
/// scenarios spread agents over the four corner squares (side 0.2 *
/// map_size) and put each goal in the diagonally opposite square. Starts face
/// their goal center.
Scenario generate_scenario(Family family, int n_agents, int n_obstacles,
                           std::uint64_t seed, double map_size = 128.0);

/// Corner square index (0: lower-left, 1: lower-right, 2: upper-right,
/// 3: upper-left) containing `p`, or -1.
int corner_region(Vec2 p, double map_size);

enum class AgentStatus { active, at_goal, crashed };
std::string_view to_string(AgentStatus status);

struct AgentState {
  Pose pose;
  AgentStatus status{AgentStatus::active};
  std::optional<int> goal_time;

  bool active() const { return status == AgentStatus::active; }
  bool operator==(const AgentState&) const = default;
};

std::vector<AgentState> initial_states(const Scenario& scenario);

struct RewardConstants {
  double goal{3.0};
  double crash{10.0};
  double time{0.1};
};

struct StepResult {
  std::vector<AgentState> next;
  std::vector<double> rewards;
  std::vector<bool> done;  // status is absorbing after this step
  std::vector<CrashKind> crashes;
};

/// Moves every active agent at once, then tests crashes and goal arrival on
/// the post-move configuration. `t` is the number of steps already taken, so
/// an agent arriving during this call gets goal_time t + 1.
StepResult env_step(const WorldMap& world, std::span<const Vec2> goals,
                    std::span<const AgentState> states,
                    std::span<const Action> joint_action, int t,
                    const RewardConstants& rewards = {});

/// Indices j != i of active agents within `range` of agent i.
std::vector<int> neighbors(std::span<const AgentState> states, int i, double range);

struct Observation {
  Pose pose;
  LidarScan lidar{};   // normalized by the lidar range
  Vec2 goal_disp;      // (goal - position) / map_size, world frame
  Action dwa_suggestion;
};

inline constexpr int kObservationFeatures = 4 + kLidarBeams + 2 + 2;
using ObservationFeatures = std::array<float, kObservationFeatures>;

/// Observation of agent i. Every other agent's body appears in the lidar.
Observation observe(const WorldMap& world, std::span<const AgentState> states,
                    int i, Vec2 goal, const DwaConfig& dwa);

/// Flat network input: (x, y) / map_size, cos, sin, lidar, goal_disp, and the
/// DWA suggestion scaled by the velocity limits.
ObservationFeatures observation_features(const Observation& obs, double map_size);

// ---------------------------------------------------------------------------
// Solitary rollouts

enum class SolitaryMode { removed, frozen };
std::string_view to_string(SolitaryMode mode);
SolitaryMode parse_solitary_mode(std::string_view text);

class SolitaryTimeout : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using SolitaryPolicy = std::function<Action(const Observation&, Vec2 goal)>;

/// Runs agent i alone and returns its goal time. With `frozen`, the other
/// agents stay at their starts as static bodies. Throws SolitaryTimeout when
/// the goal is not reached within t_max (crashes included).
int solitary_rollout(const Scenario& scenario, int i, const SolitaryPolicy& policy,
                     SolitaryMode mode, const DwaConfig& dwa, int t_max = kDefaultTMax);

// ---------------------------------------------------------------------------
// Trajectory log

struct TraceRecord {
  int t{0};
  int agent{0};
  double x{0.0};
  double y{0.0};
  double theta{0.0};
  int f{1};
  double v{0.0};
  double w{0.0};
  double r_hat{0.0};
  double r_tilde{0.0};
  AgentStatus status{AgentStatus::active};

  bool operator==(const TraceRecord&) const = default;
};

enum class FailureCause { none, crash, timeout };
std::string_view to_string(FailureCause cause);

struct EpisodeResult {
  bool success{false};
  std::vector<std::optional<int>> goal_times;
  std::vector<TraceRecord> trace;
  FailureCause failure{FailureCause::none};

  /// Latest goal time; only meaningful on success.
  int makespan() const;
};

/// Builds the outcome from final agent states. Success requires every agent
/// at its goal within t_max and no crash at any point.
EpisodeResult summarize_episode(std::span<const AgentState> final_states,
                                std::vector<TraceRecord> trace, int t_max = kDefaultTMax);

// ---------------------------------------------------------------------------
// File formats

void write_scenario(std::ostream& os, const Scenario& scenario);
Scenario read_scenario(std::istream& is);
void save_scenario(const std::string& path, const Scenario& scenario);
Scenario load_scenario(const std::string& path);

/// Comment header (map, obstacles, goals) followed by one
/// `t, agent_id, x, y, theta, f, v, w, r_hat, r_tilde, status` line per record.
void write_trace(std::ostream& os, const Scenario& scenario,
                 std::span<const TraceRecord> records);

struct TraceFile {
  double map_size{128.0};
  std::vector<Circle> obstacles;
  std::vector<Vec2> goals;
  std::vector<TraceRecord> records;
};
TraceFile read_trace(std::istream& is);

}  // namespace fairnav
