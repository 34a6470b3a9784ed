#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace fairnav {

struct Vec2 {
  double x{0.0};
  double y{0.0};

  constexpr Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2 operator-() const { return {-x, -y}; }
  constexpr bool operator==(const Vec2&) const = default;

  constexpr double dot(const Vec2& o) const { return x * o.x + y * o.y; }
  double norm() const { return std::hypot(x, y); }
};

/// Position and heading of a robot. Heading lives in (-pi, pi].
struct Pose {
  double x{0.0};
  double y{0.0};
  double theta{0.0};

  constexpr Vec2 position() const { return {x, y}; }
  constexpr bool operator==(const Pose&) const = default;
};

struct Circle {
  double cx{0.0};
  double cy{0.0};
  double radius{1.0};

  constexpr Vec2 center() const { return {cx, cy}; }
  constexpr bool operator==(const Circle&) const = default;
};

struct WorldMap {
  double map_size{128.0};
  std::vector<Circle> obstacles;

  bool operator==(const WorldMap&) const = default;
};

/// Velocity command in world units and radians per timestep.
struct Action {
  double v{0.0};
  double w{0.0};

  constexpr bool operator==(const Action&) const = default;
};

inline constexpr int kLidarBeams = 64;
using LidarScan = std::array<double, kLidarBeams>;

/// Environment constants that scale with the map size.
struct Limits {
  double map_size{128.0};

  constexpr double v_max() const { return 0.05 * map_size; }
  static constexpr double w_max() { return 0.25 * std::numbers::pi; }
  constexpr double robot_radius() const { return 0.02 * map_size; }
  constexpr double goal_radius() const { return 0.02 * map_size; }
  constexpr double lidar_range() const { return 0.1 * map_size; }
  constexpr double comm_range() const { return 0.15 * map_size; }
};

/// Wraps an angle into (-pi, pi].
double normalize_angle(double theta);

Action clamp_action(const Action& action, const Limits& limits);

/// Exact unicycle integration over one timestep.
Pose step_kinematics(const Pose& pose, const Action& action);

/// Distance along the ray to the first intersection with `circle`, or a
/// negative value when the ray misses. Tangent rays count as hits; an origin
/// inside the circle returns 0.
double ray_circle_distance(Vec2 origin, Vec2 direction, const Circle& circle);

/// 64 equally spaced beams starting at the robot heading, clipped to the
/// lidar range. `others` are additional bodies (usually other robots).
LidarScan lidar_scan(const Pose& pose, const WorldMap& world,
                     std::span<const Circle> others);

/// World-frame angle of beam `k` for a robot with heading `theta`.
double beam_angle(double theta, int k);

enum class CrashKind { none, obstacle, agent };

/// Obstacle contact, leaving the map, and robot-robot contact, in that
/// order of precedence.
CrashKind check_crash(const Pose& pose, const WorldMap& world,
                      std::span<const Pose> other_agents);

/// World-frame positional offset of `a` relative to `b`; headings ignored.
constexpr Vec2 relative_offset(const Pose& a, const Pose& b) {
  return {a.x - b.x, a.y - b.y};
}

}  // namespace fairnav
