#include "fairnav/geom2d.hpp"

#include <algorithm>

namespace fairnav {

double normalize_angle(double theta) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(theta, two_pi);
  if (r <= -std::numbers::pi) r += two_pi;
  if (r > std::numbers::pi) r -= two_pi;
  return r;
}

Action clamp_action(const Action& action, const Limits& limits) {
  return {std::clamp(action.v, 0.0, limits.v_max()),
          std::clamp(action.w, -Limits::w_max(), Limits::w_max())};
}

Pose step_kinematics(const Pose& pose, const Action& action) {
  const double v = action.v;
  const double w = action.w;
  if (std::abs(w) < 1e-9) {
    return {pose.x + v * std::cos(pose.theta), pose.y + v * std::sin(pose.theta),
            normalize_angle(pose.theta + w)};
  }
  const double r = v / w;
  const double th = pose.theta;
  return {pose.x + r * (std::sin(th + w) - std::sin(th)),
          pose.y - r * (std::cos(th + w) - std::cos(th)), normalize_angle(th + w)};
}

double ray_circle_distance(Vec2 origin, Vec2 direction, const Circle& circle) {
  const Vec2 oc = origin - circle.center();
  const double c = oc.dot(oc) - circle.radius * circle.radius;
  if (c <= 0.0) return 0.0;
  const double b = oc.dot(direction);
  const double disc = b * b - c;
  if (disc < 0.0) return -1.0;
  const double t = -b - std::sqrt(disc);
  return t >= 0.0 ? t : -1.0;
}

double beam_angle(double theta, int k) {
  return theta + 2.0 * std::numbers::pi * static_cast<double>(k) / kLidarBeams;
}

LidarScan lidar_scan(const Pose& pose, const WorldMap& world,
                     std::span<const Circle> others) {
  const double max_range = Limits{world.map_size}.lidar_range();
  LidarScan ranges;
  ranges.fill(max_range);
  const Vec2 origin = pose.position();

  auto cast = [&](const Circle& c) {
    // Skip circles that cannot be reached by any beam.
    const double reach = max_range + c.radius;
    const Vec2 d = c.center() - origin;
    if (d.dot(d) > reach * reach) return;
    for (int k = 0; k < kLidarBeams; ++k) {
      const double a = beam_angle(pose.theta, k);
      const double t = ray_circle_distance(origin, {std::cos(a), std::sin(a)}, c);
      if (t >= 0.0 && t < ranges[k]) ranges[k] = t;
    }
  };
  for (const auto& c : world.obstacles) cast(c);
  for (const auto& c : others) cast(c);
  return ranges;
}

CrashKind check_crash(const Pose& pose, const WorldMap& world,
                      std::span<const Pose> other_agents) {
  const Limits lim{world.map_size};
  const double r = lim.robot_radius();
  const Vec2 p = pose.position();
  for (const auto& obs : world.obstacles) {
    if ((p - obs.center()).norm() < obs.radius + r) return CrashKind::obstacle;
  }
  if (p.x - r < 0.0 || p.y - r < 0.0 || p.x + r > world.map_size ||
      p.y + r > world.map_size) {
    return CrashKind::obstacle;
  }
  for (const auto& other : other_agents) {
    if ((p - other.position()).norm() < 2.0 * r) return CrashKind::agent;
  }
  return CrashKind::none;
}

}  // namespace fairnav
