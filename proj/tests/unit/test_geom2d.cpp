#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fairnav/geom2d.hpp"
#include "fairnav/rng.hpp"
#include "oracles.hpp"

using namespace fairnav;
using std::numbers::pi;

TEST_SUITE("geom2d") {

TEST_CASE("kinematics closed-form cases") {
  CHECK(step_kinematics({0, 0, 0}, {0, 0}) == Pose{0, 0, 0});
  const Pose straight = step_kinematics({0, 0, 0}, {1, 0});
  CHECK(straight.x == doctest::Approx(1.0));
  CHECK(straight.y == doctest::Approx(0.0));
  const Pose quarter = step_kinematics({0, 0, 0}, {1, pi / 2});
  CHECK(std::abs(quarter.x - 2 / pi) < 1e-9);
  CHECK(std::abs(quarter.y - 2 / pi) < 1e-9);
  CHECK(std::abs(quarter.theta - pi / 2) < 1e-9);
}

TEST_CASE("kinematics agrees with fine Euler integration") {
  Rng rng{11};
  const Limits lim;
  for (int k = 0; k < 2000; ++k) {
    const Pose p{rng.uniform(0, 128), rng.uniform(0, 128), rng.uniform(-pi, pi)};
    const Action a{rng.uniform(0, lim.v_max()), rng.uniform(-Limits::w_max(), Limits::w_max())};
    const Pose exact = step_kinematics(p, a);
    const Pose ref = oracle::euler_step(p, a);
    CHECK(std::hypot(exact.x - ref.x, exact.y - ref.y) < 1e-3);
    CHECK(exact.theta > -pi);
    CHECK(exact.theta <= pi);
  }
}

TEST_CASE("angles wrap into (-pi, pi]") {
  CHECK(normalize_angle(pi) == doctest::Approx(pi));
  CHECK(normalize_angle(-pi) == doctest::Approx(pi));
  CHECK(normalize_angle(3 * pi / 2) == doctest::Approx(-pi / 2));
  CHECK(normalize_angle(-5 * pi / 2) == doctest::Approx(-pi / 2));
}

TEST_CASE("clamp keeps actions inside the limits") {
  const Limits lim;
  const Action a = clamp_action({100, -4}, lim);
  CHECK(a.v == lim.v_max());
  CHECK(a.w == -Limits::w_max());
  CHECK(clamp_action({-1, 0}, lim).v == 0.0);
}

TEST_CASE("lidar examples") {
  WorldMap empty;
  for (double r : lidar_scan({64, 64, 0.3}, empty, {})) CHECK(r == 12.8);

  WorldMap one;
  one.obstacles.push_back({10, 0, 2});
  CHECK(lidar_scan({0, 0, 0}, one, {})[0] == doctest::Approx(8.0));

  WorldMap around;
  around.obstacles.push_back({5, 5, 3});
  for (double r : lidar_scan({5, 5, 1.0}, around, {})) CHECK(r == 0.0);
}

TEST_CASE("lidar sees other agents and agrees with the ray-march oracle") {
  Rng rng{12};
  for (int w = 0; w < 10; ++w) {
    WorldMap world;
    for (int k = 0; k < 15; ++k) world.obstacles.push_back({rng.uniform(0, 128), rng.uniform(0, 128), rng.uniform(6.4, 10.24)});
    const std::vector<Circle> others{{rng.uniform(0, 128), rng.uniform(0, 128), 2.56}};
    const Pose p{rng.uniform(0, 128), rng.uniform(0, 128), rng.uniform(-pi, pi)};
    const auto got = lidar_scan(p, world, others);
    const auto want = oracle::raymarch_lidar(p, world, others);
    for (int b = 0; b < kLidarBeams; ++b) {
      CHECK(got[b] >= 0.0);
      CHECK(got[b] <= 12.8);
      CHECK(std::abs(got[b] - want[b]) < 1e-3);
    }
  }
}

TEST_CASE("lidar is invariant under rotating world and pose together") {
  Rng rng{13};
  for (int w = 0; w < 20; ++w) {
    WorldMap world;
    for (int k = 0; k < 10; ++k) world.obstacles.push_back({rng.uniform(44, 84), rng.uniform(44, 84), rng.uniform(2, 6)});
    const Pose p{64 + rng.uniform(-5, 5), 64 + rng.uniform(-5, 5), rng.uniform(-pi, pi)};
    const double phi = rng.uniform(-pi, pi);
    auto rot = [&](Vec2 v) {
      const Vec2 d = v - Vec2{64, 64};
      return Vec2{64 + d.x * std::cos(phi) - d.y * std::sin(phi), 64 + d.x * std::sin(phi) + d.y * std::cos(phi)};
    };
    WorldMap turned;
    for (const auto& c : world.obstacles) {
      const Vec2 q = rot(c.center());
      turned.obstacles.push_back({q.x, q.y, c.radius});
    }
    const Vec2 pp = rot(p.position());
    const auto a = lidar_scan(p, world, {});
    const auto b = lidar_scan({pp.x, pp.y, normalize_angle(p.theta + phi)}, turned, {});
    for (int k = 0; k < kLidarBeams; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-9));
  }
}

TEST_CASE("ray-circle tangent counts as a hit") {
  CHECK(ray_circle_distance({0, 0}, {1, 0}, {5, 1, 1}) == doctest::Approx(5.0));
  CHECK(ray_circle_distance({0, 0}, {1, 0}, {5, 1.001, 1}) < 0.0);
  CHECK(ray_circle_distance({5, 1}, {1, 0}, {5, 1, 1}) == 0.0);
}

TEST_CASE("crash thresholds") {
  WorldMap world;
  const std::vector<Pose> near{{55.13, 50, 0}};
  const std::vector<Pose> touching{{55.11, 50, 0}};
  CHECK(check_crash({50, 50, 0}, world, near) == CrashKind::none);
  CHECK(check_crash({50, 50, 0}, world, touching) == CrashKind::agent);

  world.obstacles.push_back({30, 30, 8});
  CHECK(check_crash({30, 30, 0}, world, {}) == CrashKind::obstacle);
  CHECK(check_crash({1, 50, 0}, WorldMap{}, {}) == CrashKind::obstacle);
  // Obstacle contact outranks agent contact.
  CHECK(check_crash({30, 30, 0}, world, std::vector<Pose>{{31, 30, 0}}) == CrashKind::obstacle);
}

TEST_CASE("agent crash is symmetric") {
  Rng rng{14};
  const WorldMap world;
  for (int k = 0; k < 500; ++k) {
    const Pose a{rng.uniform(10, 20), rng.uniform(10, 20), 0};
    const Pose b{rng.uniform(10, 20), rng.uniform(10, 20), 0};
    CHECK(check_crash(a, world, std::vector<Pose>{b}) == check_crash(b, world, std::vector<Pose>{a}));
  }
}

TEST_CASE("relative offset") {
  CHECK(relative_offset({5, 5, 0}, {3, 4, 0}) == Vec2{2, 1});
  CHECK(relative_offset({7, 2, 1}, {7, 2, 1}) == Vec2{0, 0});
  CHECK(relative_offset({6, 5, 0}, {3, 4, pi}) == Vec2{3, 1});
  const Pose a{1.5, -2, 0.2};
  const Pose b{-4, 9, 1};
  CHECK(relative_offset(a, b) == -relative_offset(b, a));
}

}  // TEST_SUITE
