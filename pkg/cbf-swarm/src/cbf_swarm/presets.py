"""
Named scenarios with fixed geometry.

    df_crossing      two agents whose straight paths cross near the origin at
                     right angles; the second reaches the crossing first
    dr_three_agent   a parked agent at the origin with two movers passing it
                     on opposite sides in opposite directions
    five_agent_demo  the 5-agent scenario sampled from seed 0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

from .errors import ConfigError
from .montecarlo import RngStream, sample_scenario
from .policies import Policy, PolicyKind
from .world import ScenarioConfig

DEMO_SEED = 0


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    default_policy: Policy
    build: Callable[[ScenarioConfig], ScenarioConfig]


def df_crossing(cfg: ScenarioConfig) -> ScenarioConfig:
    """
    Agent 1 crosses agent 0's path at 43% of its own path, agent 0 at 51%.

    Both start at rest under the same LQR gain, so both cover the same
    fraction of their path at any time and the offset makes them meet
    obliquely. A mirror-symmetric crossing ends with both agents pressed
    head-on and stopped instead.
    """
    return cfg.replace(
        n_agents=2,
        starts=((-8.0, -1.2), (1.2, -6.5)),
        goals=((8.0, 1.2), (-1.2, 8.5)),
    )


def dr_three_agent(cfg: ScenarioConfig) -> ScenarioConfig:
    """Agent 1 is the parked middle agent; its goal is its start."""
    return cfg.replace(
        n_agents=3,
        starts=((-8.0, 1.5), (0.0, 0.0), (8.0, -1.5)),
        goals=((8.0, 1.5), (0.0, 0.0), (-8.0, -1.5)),
    )


def five_agent_demo(cfg: ScenarioConfig) -> ScenarioConfig:
    return sample_scenario(RngStream(DEMO_SEED), cfg.replace(n_agents=5, starts=(), goals=()))


MIDDLE_AGENT = 1

PRESETS: Dict[str, Preset] = {
    p.name: p
    for p in (
        Preset("df_crossing", "two agents crossing paths", Policy(PolicyKind.DEC_FOLLOWER), df_crossing),
        Preset("dr_three_agent", "two agents passing a stationary one", Policy(PolicyKind.DEC_RECIPROCAL), dr_three_agent),
        Preset("five_agent_demo", "5-agent sampled scenario", Policy(PolicyKind.PCCA_DELAY), five_agent_demo),
    )
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r} (choose from {', '.join(PRESETS)})") from None


def build_preset(name: str, cfg: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    """Placed scenario for a named preset, taking physical and controller parameters from cfg."""
    return get_preset(name).build((cfg or ScenarioConfig()).replace(starts=(), goals=()))
