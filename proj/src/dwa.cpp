#include "fairnav/dwa.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace fairnav {

void DwaConfig::validate() const {
  if (v_samples < 2 || w_samples < 2) {
    throw std::invalid_argument("dwa: sample counts must be >= 2");
  }
  if (horizon < 1) throw std::invalid_argument("dwa: horizon must be >= 1");
  if (w_heading < 0.0 || w_clearance < 0.0 || w_velocity < 0.0) {
    throw std::invalid_argument("dwa: weights must be non-negative");
  }
}

std::vector<Vec2> lidar_points(const Pose& pose, const LidarScan& ranges,
                               double max_range) {
  std::vector<Vec2> pts;
  for (int k = 0; k < kLidarBeams; ++k) {
    if (ranges[k] >= max_range) continue;
    const double a = beam_angle(pose.theta, k);
    pts.push_back({pose.x + ranges[k] * std::cos(a), pose.y + ranges[k] * std::sin(a)});
  }
  return pts;
}

namespace {

// Headings that wrap past pi differ only by rounding, so near-equal scores
// are treated as equal before the |w| tie-break.
constexpr double kScoreTie = 1e-9;

bool out_of_bounds(Vec2 p, double r, double map_size) {
  return p.x - r < 0.0 || p.y - r < 0.0 || p.x + r > map_size || p.y + r > map_size;
}

}  // namespace

std::vector<DwaCandidate> dwa_candidates(const Pose& pose,
                                         std::span<const Vec2> obstacle_points,
                                         Vec2 goal, double map_size,
                                         const DwaConfig& config) {
  const Limits lim{map_size};
  const double r = lim.robot_radius();
  const double max_range = lim.lidar_range();
  std::vector<DwaCandidate> out;
  out.reserve(static_cast<std::size_t>(config.v_samples * config.w_samples));

  for (int i = 0; i < config.v_samples; ++i) {
    const double v = lim.v_max() * i / (config.v_samples - 1);
    for (int j = 0; j < config.w_samples; ++j) {
      const double w = -Limits::w_max() + 2.0 * Limits::w_max() * j / (config.w_samples - 1);
      DwaCandidate cand{{v, w}, false, 0.0};

      Pose p = pose;
      double clearance = max_range;
      bool reached = false;
      for (int k = 0; k < config.horizon && !cand.crashes && !reached; ++k) {
        p = step_kinematics(p, cand.action);
        const Vec2 pos = p.position();
        if (out_of_bounds(pos, r, map_size)) {
          cand.crashes = true;
          break;
        }
        for (const auto& q : obstacle_points) {
          const double gap = (pos - q).norm() - r;
          if (gap < 0.0) {
            cand.crashes = true;
            break;
          }
          clearance = std::min(clearance, gap);
        }
        reached = (pos - goal).norm() <= lim.goal_radius();
      }
      if (!cand.crashes) {
        double heading_term = 1.0;
        if (!reached) {
          const Vec2 to_goal = goal - p.position();
          const double err =
              std::abs(normalize_angle(std::atan2(to_goal.y, to_goal.x) - p.theta));
          heading_term = 1.0 - err / std::numbers::pi;
        }
        cand.score = config.w_heading * heading_term +
                     config.w_clearance * (clearance / max_range) +
                     config.w_velocity * (v / lim.v_max());
      }
      out.push_back(cand);
    }
  }
  return out;
}

Action dwa_suggest(const Pose& pose, std::span<const Vec2> obstacle_points,
                   Vec2 goal, double map_size, const DwaConfig& config) {
  const auto cands = dwa_candidates(pose, obstacle_points, goal, map_size, config);
  const DwaCandidate* best = nullptr;
  for (const auto& c : cands) {
    if (c.crashes) continue;
    // Scores within kScoreTie are ties; strict comparisons keep the earliest
    // index among candidates with equal |w|.
    if (best == nullptr || c.score > best->score + kScoreTie ||
        (c.score >= best->score - kScoreTie && std::abs(c.action.w) < std::abs(best->action.w))) {
      best = &c;
    }
  }
  if (best == nullptr) return {0.0, Limits::w_max()};
  return best->action;
}

}  // namespace fairnav
