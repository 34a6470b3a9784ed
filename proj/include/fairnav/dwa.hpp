#pragma once

#include <span>
#include <vector>

#include "fairnav/geom2d.hpp"

namespace fairnav {

struct DwaConfig {
  int v_samples{11};
  int w_samples{11};
  int horizon{5};
  double w_heading{1.0};
  double w_clearance{1.0};
  double w_velocity{0.2};

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
};

/// Point obstacles at the endpoints of beams that hit something.
std::vector<Vec2> lidar_points(const Pose& pose, const LidarScan& ranges,
                               double max_range);

/// Score of one candidate velocity, exposed for tests.
struct DwaCandidate {
  Action action;
  bool crashes{false};
  double score{0.0};
};

/// Scores the full velocity grid in index order (v-major).
std::vector<DwaCandidate> dwa_candidates(const Pose& pose,
                                         std::span<const Vec2> obstacle_points,
                                         Vec2 goal, double map_size,
                                         const DwaConfig& config);

/// Dynamic window controller over the full velocity range. Candidates are
/// rolled out for `horizon` steps against the point-obstacle picture and the
/// map bounds; a rollout stops early once it enters the goal region. Returns
/// (0, w_max) when every candidate crashes.
Action dwa_suggest(const Pose& pose, std::span<const Vec2> obstacle_points,
                   Vec2 goal, double map_size, const DwaConfig& config);

}  // namespace fairnav
