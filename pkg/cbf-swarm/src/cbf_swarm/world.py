"""
Holonomic double-integrator agents and scenario state.

Each agent is a disk of radius r0 whose center obeys

    x' = v_x,  y' = v_y,  v_x' = u_x,  v_y' = u_y

Controls are held constant over a sample (zero-order hold), and `step`
propagates that exactly, so barrier violations measured on a trajectory
come from the controllers and not from the integrator.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, ContractError

Vec2 = NDArray[np.float64]
Point = Tuple[float, float]

# Default setup: 5 agents of radius 2 inside a circle of radius 11, 50 ms sample.
DEFAULT_N_AGENTS = 5
DEFAULT_R0 = 2.0
DEFAULT_OUTER_RADIUS = 11.0
DEFAULT_DT = 0.05
DEFAULT_HORIZON = 100.0
DEFAULT_L0 = 6.0
DEFAULT_L1 = 5.0
DEFAULT_LQR_Q = 0.2
DEFAULT_TOL = 0.1
DEFAULT_FILTER_TAU = 0.2


def vec2(x: float, y: float) -> Vec2:
    return np.array([x, y], dtype=float)


@dataclass(frozen=True)
class AgentState:
    """Position and velocity of one agent's center."""
    pos: Vec2
    vel: Vec2

    def __post_init__(self):
        if not (np.all(np.isfinite(self.pos)) and np.all(np.isfinite(self.vel))):
            raise ContractError(f"non-finite agent state: pos={self.pos}, vel={self.vel}")


@dataclass(frozen=True, eq=False)
class WorldState:
    """
    Snapshot of all agents at one sample instant.

    Positions and velocities are stored as (N, 2) arrays; `agents` gives the
    per-agent view.
    """
    positions: NDArray[np.float64]
    velocities: NDArray[np.float64]
    time: float = 0.0
    step_index: int = 0

    def __post_init__(self):
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ContractError(f"positions must be (N, 2), got {self.positions.shape}")
        if self.velocities.shape != self.positions.shape:
            raise ContractError(
                f"velocities shape {self.velocities.shape} != positions shape {self.positions.shape}"
            )
        if self.positions.shape[0] < 1:
            raise ContractError("world needs at least one agent")

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def agents(self) -> List[AgentState]:
        return [AgentState(p.copy(), v.copy()) for p, v in zip(self.positions, self.velocities)]

    def agent(self, i: int) -> AgentState:
        return AgentState(self.positions[i].copy(), self.velocities[i].copy())

    @classmethod
    def from_agents(cls, agents: Sequence[AgentState], time: float = 0.0, step_index: int = 0) -> "WorldState":
        positions = np.array([a.pos for a in agents], dtype=float).reshape(-1, 2)
        velocities = np.array([a.vel for a in agents], dtype=float).reshape(-1, 2)
        return cls(positions, velocities, time, step_index)


@dataclass(frozen=True)
class ScenarioConfig:
    """
    Physical, controller and run parameters of one scenario.

    Defaults are the Monte-Carlo setup (r0=2, R0=11, dt=50 ms, l0=6, l1=5,
    LQR q=0.2, tolerances 0.1, 100 s horizon). `starts`/`goals` may both be
    empty, which marks an unplaced template for `sample_scenario`.

    `radius_margin` is added to the constraint radius squared, in h units:
    r^2 = (2 r0)^2 + radius_margin.
    """
    n_agents: int = DEFAULT_N_AGENTS
    r0: float = DEFAULT_R0
    R0: float = DEFAULT_OUTER_RADIUS
    radius_margin: float = 0.0
    dt: float = DEFAULT_DT
    horizon: float = DEFAULT_HORIZON
    l0: float = DEFAULT_L0
    l1: float = DEFAULT_L1
    lqr_q: float = DEFAULT_LQR_Q
    convergence_pos_tol: float = DEFAULT_TOL
    convergence_vel_tol: float = DEFAULT_TOL
    filter_tau: float = DEFAULT_FILTER_TAU
    starts: Tuple[Point, ...] = field(default_factory=tuple)
    goals: Tuple[Point, ...] = field(default_factory=tuple)

    def __post_init__(self):
        # Normalize to tuples of float pairs so configs hash and compare by value
        object.__setattr__(self, "starts", tuple((float(x), float(y)) for x, y in self.starts))
        object.__setattr__(self, "goals", tuple((float(x), float(y)) for x, y in self.goals))

        for name in ("r0", "R0", "radius_margin", "dt", "horizon", "l0", "l1", "lqr_q",
                     "convergence_pos_tol", "convergence_vel_tol", "filter_tau"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(name, "must be finite")
        if self.n_agents < 1:
            raise ConfigError("n_agents", f"must be >= 1, got {self.n_agents}")
        if self.r0 <= 0:
            raise ConfigError("r0", f"must be > 0, got {self.r0}")
        if self.R0 <= self.r0:
            raise ConfigError("R0", f"must exceed r0={self.r0}, got {self.R0}")
        if self.radius_margin < 0:
            raise ConfigError("radius_margin", f"must be >= 0, got {self.radius_margin}")
        if self.dt <= 0:
            raise ConfigError("dt", f"must be > 0, got {self.dt}")
        if self.horizon <= 0:
            raise ConfigError("horizon", f"must be > 0, got {self.horizon}")
        if self.l0 <= 0 or self.l1 <= 0:
            raise ConfigError("l0", f"barrier gains must be positive, got l0={self.l0}, l1={self.l1}")
        if self.l1 ** 2 < 4 * self.l0:
            raise ConfigError("l1", f"need l1^2 >= 4 l0 for real roots, got l0={self.l0}, l1={self.l1}")
        if self.lqr_q <= 0:
            raise ConfigError("lqr_q", f"must be > 0, got {self.lqr_q}")
        if self.convergence_pos_tol <= 0 or self.convergence_vel_tol <= 0:
            raise ConfigError("convergence_pos_tol", "convergence tolerances must be > 0")
        if self.filter_tau <= 0:
            raise ConfigError("filter_tau", f"must be > 0, got {self.filter_tau}")

        if self.starts or self.goals:
            if len(self.starts) != self.n_agents:
                raise ConfigError("starts", f"expected {self.n_agents} entries, got {len(self.starts)}")
            if len(self.goals) != self.n_agents:
                raise ConfigError("goals", f"expected {self.n_agents} entries, got {len(self.goals)}")

    @property
    def is_placed(self) -> bool:
        return len(self.starts) == self.n_agents and len(self.goals) == self.n_agents

    @property
    def constraint_radius_sq(self) -> float:
        """r^2 used in the barrier constraints (physical (2 r0)^2 plus margin)."""
        return (2.0 * self.r0) ** 2 + self.radius_margin

    @property
    def wall_radius(self) -> float:
        """Radius the agent center must stay within: R0 - r0."""
        return self.R0 - self.r0

    @property
    def lambda1(self) -> float:
        """Smaller root of s^2 - l1 s + l0 (2 for the default gains)."""
        return 0.5 * (self.l1 - math.sqrt(self.l1 ** 2 - 4.0 * self.l0))

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def start_array(self) -> NDArray[np.float64]:
        return np.array(self.starts, dtype=float).reshape(-1, 2)

    def goal_array(self) -> NDArray[np.float64]:
        return np.array(self.goals, dtype=float).reshape(-1, 2)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def initial_world(cfg: ScenarioConfig) -> WorldState:
    """All agents at rest on their start points at t=0."""
    if not cfg.is_placed:
        raise ContractError("scenario has no start/goal placement")
    starts = cfg.start_array()
    return WorldState(starts, np.zeros_like(starts), 0.0, 0)


def step(state: WorldState, controls, dt: float) -> WorldState:
    """
    Advance every agent by one zero-order-hold sample.

    pos' = pos + vel*dt + u*dt^2/2,  vel' = vel + u*dt
    """
    u = np.asarray(controls, dtype=float).reshape(-1, 2)
    if u.shape[0] != state.n_agents:
        raise ContractError(f"got {u.shape[0]} controls for {state.n_agents} agents")
    if dt <= 0:
        raise ContractError(f"dt must be > 0, got {dt}")

    positions = state.positions + state.velocities * dt + 0.5 * u * dt * dt
    velocities = state.velocities + u * dt
    return WorldState(positions, velocities, state.time + dt, state.step_index + 1)


def relative_state(state: WorldState, i: int, j: int) -> Tuple[Vec2, Vec2]:
    """Displacement xi_ij = pos_i - pos_j and relative velocity v_ij = vel_i - vel_j."""
    n = state.n_agents
    if i == j:
        raise ContractError(f"relative state needs two distinct agents, got i=j={i}")
    if not (0 <= i < n and 0 <= j < n):
        raise ContractError(f"agent index out of range: i={i}, j={j}, n={n}")
    xi = state.positions[i] - state.positions[j]
    v = state.velocities[i] - state.velocities[j]
    return xi, v
