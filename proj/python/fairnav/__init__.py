"""Fair multi-agent navigation with counterfactual fairness filtering."""

import json

from ._fairnav import (
    ConfigError,
    GenerationFailed,
    PolicyBundle,
    Scenario,
    delay_stats,
    dwa_suggest,
    fairness_efficiency_reward,
    generate_scenario,
    lidar_scan,
    load_bundle,
    relative_patience,
    render_svg,
    rollout,
    step_kinematics,
    train,
)
from ._fairnav import evaluate_json as _evaluate_json


def evaluate(bundle, **settings):
    """Metrics report as a dict; efficiency fields are None without successes."""
    return json.loads(_evaluate_json(bundle, **settings))


__all__ = [
    "ConfigError",
    "GenerationFailed",
    "PolicyBundle",
    "Scenario",
    "delay_stats",
    "dwa_suggest",
    "evaluate",
    "fairness_efficiency_reward",
    "generate_scenario",
    "lidar_scan",
    "load_bundle",
    "relative_patience",
    "render_svg",
    "rollout",
    "step_kinematics",
    "train",
]
