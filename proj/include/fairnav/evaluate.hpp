#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fairnav/envcore.hpp"
#include "fairnav/ncf2.hpp"
#include "fairnav/nets.hpp"

namespace fairnav {

struct EvalSettings {
  Family family{Family::uniform};
  int n_agents{2};
  int n_obstacles{25};
  int n_episodes{100};
  std::uint64_t seed{1};
  double map_size{128.0};
  int t_max{kDefaultTMax};
  Controller controller{Controller::ncf2};
  AblationFlags ablations;
  FairnessConstants fairness;
  SolitaryMode delay_mode{SolitaryMode::removed};
  DwaConfig dwa;
  double residual_fraction{0.2};
  int workers{1};
};

struct DelayStats {
  double vd{0.0};     // population variance
  double maxd{0.0};
  double meand{0.0};
};

/// Requires at least one delay.
DelayStats delay_stats(std::span<const double> delays);

struct EpisodeMetrics {
  std::uint64_t index{0};
  bool success{false};
  FailureCause failure{FailureCause::none};
  int makespan{0};
  std::vector<std::optional<int>> goal_times;
  std::vector<std::optional<int>> solitary_times;  // empty on failure
  std::optional<DelayStats> delays;                // absent without a usable agent
  int solitary_timeouts{0};
};

struct MetricsReport {
  EvalSettings settings;
  int n_episodes{0};
  int n_successes{0};
  double sr{0.0};  // percent
  std::optional<double> ms;
  std::optional<double> vd;
  std::optional<double> maxd;
  std::optional<double> meand;
  int crash_failures{0};
  int timeout_failures{0};
  int solitary_timeouts{0};
};

/// Held-out scenarios, keyed apart from the training stream.
Scenario evaluation_scenario(const EvalSettings& settings, std::uint64_t episode);

/// Deterministic cooperative rollout plus, on success, one solitary rollout
/// per agent for the delay baseline. Agents whose solitary rollout times out
/// are left out of the delay statistics.
EpisodeMetrics evaluate_episode(const PolicyBundle& bundle, const EvalSettings& settings,
                                std::uint64_t episode);

/// Sums in episode-index order, so the result does not depend on the order in
/// which episodes finished.
MetricsReport aggregate(const EvalSettings& settings, std::span<const EpisodeMetrics> episodes);

MetricsReport evaluate(const PolicyBundle& bundle, const EvalSettings& settings);

/// Fixed-key-order JSON; efficiency fields are null without successes.
std::string report_json(const MetricsReport& report);

/// SVG figure of a trajectory log: obstacles, start and goal markers, one
/// polyline per agent, gray circles where an agent was told to wait, crosses
/// at crashes and triangles where an agent timed out.
std::string render_svg(const TraceFile& trace);

}  // namespace fairnav
