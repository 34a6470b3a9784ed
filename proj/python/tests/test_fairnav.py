import math

import pytest

import fairnav


def test_straight_step():
    x, y, theta = fairnav.step_kinematics((0.0, 0.0, 0.0), 1.0, 0.0)
    assert (x, y, theta) == pytest.approx((1.0, 0.0, 0.0))


def test_quarter_turn():
    x, y, theta = fairnav.step_kinematics((0.0, 0.0, 0.0), 1.0, math.pi / 2)
    assert x == pytest.approx(2 / math.pi)
    assert y == pytest.approx(2 / math.pi)
    assert theta == pytest.approx(math.pi / 2)


def test_lidar_hits_circle_ahead():
    scan = fairnav.lidar_scan((0.0, 0.0, 0.0), [(10.0, 0.0, 2.0)])
    assert len(scan) == 64
    assert scan[0] == pytest.approx(8.0)
    assert max(scan) == pytest.approx(12.8)


def test_dwa_goes_straight_on_empty_map():
    v, w = fairnav.dwa_suggest((30.0, 64.0, 0.0), [], (100.0, 64.0))
    assert v == pytest.approx(6.4)
    assert w == 0.0


def test_scenario_round_trip_and_determinism():
    a = fairnav.generate_scenario("Corner", agents=4, obstacles=25, seed=9)
    b = fairnav.generate_scenario("Corner", agents=4, obstacles=25, seed=9)
    assert a == b
    assert len(a.starts) == 4 and len(a.goals) == 4
    assert all(6.4 <= r <= 10.24 for _, _, r in a.obstacles)
    assert fairnav.Scenario.from_text(a.to_text()) == a


def test_fairness_reward_fixture():
    r = fairnav.fairness_efficiency_reward(0, [1.0, 2.0, 3.0], 0, [0.0, 0.5, 1.0], [1, 2])
    assert r == pytest.approx(0.19166666666666665, abs=1e-12)
    assert fairnav.fairness_efficiency_reward(1, [1.0, 2.0, 3.0], 0, [0.0, 0.5, 1.0], [1, 2]) == 0.0
    assert fairnav.relative_patience([1.0, 2.0], 0, 1, [1]) == pytest.approx(1 / 3)


def test_delay_stats():
    s = fairnav.delay_stats([2.0, 4.0, 6.0])
    assert s["VD"] == pytest.approx(8 / 3)
    assert s["MAXD"] == 6.0
    assert s["MEAND"] == 4.0


def test_rollout_and_plot_with_dwa():
    bundle = fairnav.PolicyBundle(seed=0, hidden=32, head=8, key_dim=8)
    sc = fairnav.generate_scenario("Uniform", agents=1, obstacles=0, seed=3)
    result = fairnav.rollout(bundle, sc, controller="dwa")
    assert result["success"]
    assert result["trace"][0]["agent"] == 0


def test_untrained_policy_matches_dwa():
    bundle = fairnav.PolicyBundle(seed=0, hidden=32, head=8, key_dim=8)
    sc = fairnav.generate_scenario("Uniform", agents=3, obstacles=25, seed=5)
    nav = fairnav.rollout(bundle, sc, controller="nav_only")
    dwa = fairnav.rollout(bundle, sc, controller="dwa")
    assert [(r["x"], r["y"]) for r in nav["trace"]] == [(r["x"], r["y"]) for r in dwa["trace"]]


def test_evaluate_report(tmp_path):
    bundle = fairnav.PolicyBundle(seed=0, hidden=32, head=8, key_dim=8)
    report = fairnav.evaluate(bundle, agents=2, obstacles=0, episodes=4, seed=2, controller="dwa")
    assert report["n_episodes"] == 4
    assert 0.0 <= report["SR"] <= 100.0
    path = tmp_path / "b.ckpt"
    bundle.save(str(path))
    again = fairnav.evaluate(fairnav.load_bundle(str(path)), agents=2, obstacles=0, episodes=4, seed=2,
                             controller="dwa")
    assert again == report


def test_tiny_training_run(tmp_path):
    bundle, log = fairnav.train({
        "learn.checkpoint": str(tmp_path / "tiny.ckpt"),
        "learn.log": str(tmp_path / "tiny.log"),
        "env.agents": "2",
        "env.obstacles": "0",
        "env.map_size": "64",
        "learn.solitary_iterations": "20",
        "learn.nav_iterations": "20",
        "learn.joint_iterations": "20",
        "learn.buffer_capacity": "1000",
        "sac.batch": "16",
        "sac.critic_warmup": "5",
        "nets.hidden": "16",
        "nets.head": "8",
        "nets.key_dim": "8",
    })
    assert log[0].startswith("#")
    assert bundle.hidden == 16
    assert fairnav.load_bundle(str(tmp_path / "tiny.ckpt")).hidden == 16


def test_bad_config_key():
    with pytest.raises(fairnav.ConfigError):
        fairnav.train({"learn.nonsense": "1"})


def test_impossible_scenario():
    with pytest.raises(ValueError):
        fairnav.generate_scenario("Uniform", agents=40)
