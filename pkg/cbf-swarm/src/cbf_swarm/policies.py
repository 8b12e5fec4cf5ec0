"""
Per-step controller policies.

Each policy turns one world snapshot into one applied control per agent by
solving barrier-constrained QPs:

    centralized   one QP over all 2N controls
    df            each agent takes the full pair constraint on its own control
    dr            each agent takes half of it
    ccs2          each agent solves for everyone, unknown preferences set to
                  zero and its own preference doubled in its rows
    pcca          each agent solves for everyone, correcting its model of the
                  others with the observed deviation w_hat (delay or filtered)
    dr-brake      dr, but all agents brake with -lambda1 v whenever any dr QP
                  is infeasible

Pair rows are emitted once per unordered pair (i < j, lexicographic); wall
rows are soft in every QP.
"""

from __future__ import annotations

import dataclasses
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from .barrier import all_in_cstar, pair_rows, wall_rows
from .baseline import LqrGain, baseline_controls, lqr_gain
from .errors import ConfigError, ContractError, NotAdmissibleError
from .qp import QpProblem, QpSolution, solve
from .world import ScenarioConfig, WorldState

logger = logging.getLogger(__name__)


class PolicyKind(StrEnum):
    CENTRALIZED = "centralized"
    DEC_FOLLOWER = "df"
    DEC_RECIPROCAL = "dr"
    CCS2 = "ccs2"
    PCCA_DELAY = "pcca"
    PCCA_FILTER = "pcca-filter"
    DR_BRAKE = "dr-brake"


_ALIASES = {
    "central": PolicyKind.CENTRALIZED,
    "dec-follower": PolicyKind.DEC_FOLLOWER,
    "dec-reciprocal": PolicyKind.DEC_RECIPROCAL,
    "pcca-delay": PolicyKind.PCCA_DELAY,
}


@dataclass(frozen=True)
class Policy:
    """
    A policy kind plus its parameter.

    `tau` is the PCCA filter time constant; None means "take filter_tau
    from the scenario config". Other kinds carry no parameter.
    """
    kind: PolicyKind
    tau: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.tau is not None:
            if self.kind is not PolicyKind.PCCA_FILTER:
                raise ConfigError("policy", f"{self.kind} takes no time constant")
            if not self.tau > 0:
                raise ConfigError("policy", f"filter time constant must be > 0, got {self.tau}")

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """
        Parse "centralized", "df", "pcca-filter", "pcca-filter:0.5", ...

        Raises:
            ConfigError: Unknown policy name or bad time constant.
        """
        name, _, param = text.strip().lower().partition(":")
        name = _ALIASES.get(name, name)
        try:
            kind = PolicyKind(name)
        except ValueError:
            choices = ", ".join(k.value for k in PolicyKind)
            raise ConfigError("policy", f"unknown policy {text!r} (choose from {choices})") from None
        tau = None
        if param:
            try:
                tau = float(param)
            except ValueError:
                raise ConfigError("policy", f"bad time constant in {text!r}") from None
        return cls(kind, tau)

    @property
    def label(self) -> str:
        return self.kind.value if self.tau is None else f"{self.kind.value}:{self.tau:g}"

    def __str__(self) -> str:
        return self.label


# The six variants compared in the Monte-Carlo batch
DEFAULT_POLICIES: Tuple[Policy, ...] = tuple(
    Policy(k) for k in (
        PolicyKind.CENTRALIZED,
        PolicyKind.DEC_FOLLOWER,
        PolicyKind.DEC_RECIPROCAL,
        PolicyKind.CCS2,
        PolicyKind.PCCA_DELAY,
        PolicyKind.PCCA_FILTER,
    )
)


@dataclass(frozen=True, eq=False)
class PccaState:
    """One host agent's model of the others. All arrays are (N, 2)."""
    w_hat: NDArray[np.float64]
    u_prev: NDArray[np.float64]
    last_applied: NDArray[np.float64]
    steps: int = 0                  # pcca_step calls folded into this state

    @classmethod
    def initial(cls, n_agents: int) -> "PccaState":
        zeros = np.zeros((n_agents, 2))
        return cls(zeros, zeros.copy(), zeros.copy())


@dataclass(frozen=True, eq=False)
class StepOutcome:
    controls: NDArray[np.float64]                 # (N, 2) applied controls
    per_agent_feasible: Tuple[bool, ...]
    worst_violation: float
    per_agent_violation: Tuple[float, ...] = ()
    braked: bool = False
    states: Optional[Tuple[PccaState, ...]] = None

    @property
    def any_infeasible(self) -> bool:
        return not all(self.per_agent_feasible)


@dataclass(frozen=True, eq=False)
class _Constraints:
    """Pair and wall rows of one snapshot in joint-variable form."""
    n: int
    pairs: List[Tuple[int, int]]
    a: NDArray[np.float64]
    b: NDArray[np.float64]
    a_wall: NDArray[np.float64]
    b_wall: NDArray[np.float64]
    pair_matrix: NDArray[np.float64] = field(init=False)
    wall_matrix: NDArray[np.float64] = field(init=False)

    def __post_init__(self):
        n, P = self.n, len(self.pairs)
        G = np.zeros((P, 2 * n))
        for k, (i, j) in enumerate(self.pairs):
            G[k, 2 * i:2 * i + 2] = self.b[k]
            G[k, 2 * j:2 * j + 2] = -self.b[k]
        W = np.zeros((n, 2 * n))
        for i in range(n):
            W[i, 2 * i:2 * i + 2] = self.b_wall[i]
        object.__setattr__(self, "pair_matrix", G)
        object.__setattr__(self, "wall_matrix", W)

    @classmethod
    def of(cls, world: WorldState, cfg: ScenarioConfig) -> "_Constraints":
        pairs, a, b = pair_rows(world.positions, world.velocities, cfg.constraint_radius_sq, cfg.l0, cfg.l1)
        a_wall, b_wall = wall_rows(world.positions, world.velocities, cfg.wall_radius, cfg.l0, cfg.l1)
        return cls(world.n_agents, pairs, a, b, a_wall, b_wall)

    def joint_problem(self, cost_center, lo_pairs, lo_walls) -> QpProblem:
        coefs = np.vstack([self.pair_matrix, self.wall_matrix])
        lo = np.concatenate([lo_pairs, lo_walls])
        hard = np.concatenate([np.ones(len(self.pairs), dtype=bool), np.zeros(self.n, dtype=bool)])
        return QpProblem(np.asarray(cost_center, dtype=float), coefs, lo, hard)

    def agent_problem(self, i: int, u0: NDArray[np.float64], share: float) -> QpProblem:
        """Two-variable QP of agent i: its pair rows (a scaled by share) plus its wall row."""
        coefs, lo = [], []
        for k, (p, q) in enumerate(self.pairs):
            if p == i:
                coefs.append(self.b[k])
            elif q == i:
                coefs.append(-self.b[k])
            else:
                continue
            lo.append(share * self.a[k])
        coefs.append(self.b_wall[i])
        lo.append(self.a_wall[i])
        hard = np.ones(len(lo), dtype=bool)
        hard[-1] = False
        return QpProblem(np.asarray(u0, dtype=float), np.array(coefs).reshape(-1, 2), np.array(lo), hard)


def _goal_array(goals, n: int) -> NDArray[np.float64]:
    g = np.asarray(goals, dtype=float).reshape(-1, 2)
    if g.shape[0] != n:
        raise ContractError(f"got {g.shape[0]} goals for {n} agents")
    return g


def _preferred(world: WorldState, goals, cfg: ScenarioConfig, gain: Optional[LqrGain] = None) -> NDArray[np.float64]:
    gain = gain or lqr_gain(cfg.lqr_q)
    return baseline_controls(world.positions, world.velocities, _goal_array(goals, world.n_agents), gain)


def _outcome(controls, solutions: Sequence[QpSolution], **extra) -> StepOutcome:
    feasible = tuple(bool(s.feasible) for s in solutions)
    violation = tuple(float(s.max_violation) for s in solutions)
    return StepOutcome(
        controls=np.asarray(controls, dtype=float),
        per_agent_feasible=feasible,
        worst_violation=max(violation, default=0.0),
        per_agent_violation=violation,
        **extra,
    )


def centralized_step(world: WorldState, goals, cfg: ScenarioConfig) -> StepOutcome:
    """min sum ||u_i - u0_i||^2 over all agents subject to every pair row."""
    n = world.n_agents
    rows = _Constraints.of(world, cfg)
    u0 = _preferred(world, goals, cfg)
    sol = solve(rows.joint_problem(u0.ravel(), rows.a, rows.a_wall))
    return _outcome(sol.u_star.reshape(n, 2), [sol] * n)


def _decentralized(world: WorldState, goals, cfg: ScenarioConfig, share: float) -> StepOutcome:
    rows = _Constraints.of(world, cfg)
    u0 = _preferred(world, goals, cfg)
    controls = np.zeros_like(u0)
    solutions = []
    for i in range(world.n_agents):
        sol = solve(rows.agent_problem(i, u0[i], share))
        if not sol.feasible:
            logger.debug("t=%.2f agent %d: QP infeasible (violation %.3g)", world.time, i, sol.max_violation)
        controls[i] = sol.u_star
        solutions.append(sol)
    return _outcome(controls, solutions)


def dec_follower_step(world: WorldState, goals, cfg: ScenarioConfig) -> StepOutcome:
    """Each agent enforces a_ij + b_ij u_i >= 0 for every neighbor on its own."""
    return _decentralized(world, goals, cfg, share=1.0)


def dec_reciprocal_step(world: WorldState, goals, cfg: ScenarioConfig) -> StepOutcome:
    """Each agent enforces a_ij / 2 + b_ij u_i >= 0."""
    return _decentralized(world, goals, cfg, share=0.5)


def dr_brake_step(world: WorldState, goals, cfg: ScenarioConfig) -> StepOutcome:
    """
    Reciprocal policy with a shared braking fallback.

    The DR rows do not depend on anyone's preferred control, so every agent
    can check every other agent's QP. If any is infeasible all agents apply
    -lambda1 v for the step.
    """
    outcome = dec_reciprocal_step(world, goals, cfg)
    if not outcome.any_infeasible:
        return outcome
    logger.debug("t=%.2f: reciprocal QP infeasible, braking all agents", world.time)
    return dataclasses.replace(outcome, controls=-cfg.lambda1 * world.velocities, braked=True)


def ccs2_step(world: WorldState, goals, cfg: ScenarioConfig) -> StepOutcome:
    """
    Every host solves for all agents' controls around a zero preference.

    The host's own variable is the offset from its preferred control, which
    appears doubled in its pair rows and once in its wall row. Applied
    control is u*_ii + u0_i.
    """
    n = world.n_agents
    rows = _Constraints.of(world, cfg)
    u0 = _preferred(world, goals, cfg)
    controls = np.zeros_like(u0)
    solutions = []
    center = np.zeros(2 * n)
    for i in range(n):
        host = slice(2 * i, 2 * i + 2)
        lo_pairs = rows.a + 2.0 * (rows.pair_matrix[:, host] @ u0[i])
        lo_walls = rows.a_wall.copy()
        lo_walls[i] += rows.b_wall[i] @ u0[i]
        sol = solve(rows.joint_problem(center, lo_pairs, lo_walls))
        controls[i] = sol.u_star[host] + u0[i]
        solutions.append(sol)
    return _outcome(controls, solutions)


def pcca_step(
    world: WorldState,
    goals,
    cfg: ScenarioConfig,
    states: Sequence[PccaState],
    applied_prev,
    tau: Optional[float] = None,
) -> StepOutcome:
    """
    Predictor-corrector step for every host agent.

    Host i first updates its estimate of each other agent's deviation from
    the host's previous solution, w_hat_j, from the controls actually applied
    at the previous step (tau None: take it directly; otherwise low-pass it
    with time constant tau, starting from the first measurement rather than
    from zero). It then solves for all agents with
    u_j = u_ij + w_hat_j, cost ||u_ii - u0_i||^2 + sum_j ||u_ij||^2, and
    applies u*_ii.

    The updated estimator states are returned in `StepOutcome.states`.
    """
    n = world.n_agents
    if len(states) != n:
        raise ContractError(f"got {len(states)} estimator states for {n} agents")
    applied_prev = np.asarray(applied_prev, dtype=float).reshape(-1, 2)
    if applied_prev.shape[0] != n:
        raise ContractError(f"got {applied_prev.shape[0]} previous controls for {n} agents")
    if tau is not None and not tau > 0:
        raise ContractError(f"filter time constant must be > 0, got {tau}")

    rows = _Constraints.of(world, cfg)
    u0 = _preferred(world, goals, cfg)
    controls = np.zeros_like(u0)
    solutions = []
    new_states = []
    for i in range(n):
        state = states[i]
        error = applied_prev - state.u_prev
        # applied_prev is a real measurement from the second step on; the filter starts at it
        if tau is None or state.steps < 2:
            w_hat = error
        else:
            w_hat = state.w_hat + (cfg.dt / tau) * (error - state.w_hat)
        w_hat[i] = 0.0

        lo_pairs = rows.a + rows.pair_matrix @ w_hat.ravel()
        lo_walls = rows.a_wall + np.einsum("kd,kd->k", rows.b_wall, w_hat)
        center = np.zeros(2 * n)
        center[2 * i:2 * i + 2] = u0[i]
        sol = solve(rows.joint_problem(center, lo_pairs, lo_walls))

        u_star = sol.u_star.reshape(n, 2)
        controls[i] = u_star[i]
        solutions.append(sol)
        new_states.append(PccaState(w_hat=w_hat, u_prev=u_star.copy(), last_applied=applied_prev.copy(), steps=state.steps + 1))
    return _outcome(controls, solutions, states=tuple(new_states))


def feasible_point_oracle(world: WorldState, cfg: ScenarioConfig) -> NDArray[np.float64]:
    """
    Braking controls u_i = -lambda1 v_i, which satisfy every pair row with
    F_ij >= 2 ||v_ij||^2 whenever all pairs are in C*.

    Raises:
        NotAdmissibleError: Some pair is outside C*; names the first one.
    """
    ok, pair = all_in_cstar(world.positions, world.velocities, cfg.constraint_radius_sq, cfg.lambda1)
    if not ok:
        i, j = pair
        xi = world.positions[i] - world.positions[j]
        v = world.velocities[i] - world.velocities[j]
        raise NotAdmissibleError(pair, float(xi @ xi) - cfg.constraint_radius_sq, 2.0 * float(xi @ v))
    return -cfg.lambda1 * world.velocities


StepFunction = Callable[[WorldState, NDArray[np.float64], ScenarioConfig], StepOutcome]

_STATELESS: Dict[PolicyKind, StepFunction] = {
    PolicyKind.CENTRALIZED: centralized_step,
    PolicyKind.DEC_FOLLOWER: dec_follower_step,
    PolicyKind.DEC_RECIPROCAL: dec_reciprocal_step,
    PolicyKind.CCS2: ccs2_step,
    PolicyKind.DR_BRAKE: dr_brake_step,
}


class Controller:
    """
    Drives one policy through one trial.

    Holds what persists between steps: the PCCA estimator states and the
    controls applied at the previous step. Agents listed in
    `non_cooperating` ignore the QPs and apply their raw preferred control.
    """

    def __init__(
        self,
        cfg: ScenarioConfig,
        policy: Policy,
        non_cooperating: Iterable[int] = (),
    ):
        if not cfg.is_placed:
            raise ContractError("controller needs a placed scenario")
        self.cfg = cfg
        self.policy = policy
        self.goals = cfg.goal_array()
        self.gain = lqr_gain(cfg.lqr_q)
        self.non_cooperating: FrozenSet[int] = frozenset(non_cooperating)
        for i in self.non_cooperating:
            if not 0 <= i < cfg.n_agents:
                raise ContractError(f"non-cooperating agent {i} out of range for {cfg.n_agents} agents")
        self.pcca_states: Tuple[PccaState, ...] = tuple(PccaState.initial(cfg.n_agents) for _ in range(cfg.n_agents))
        self.applied_prev = np.zeros((cfg.n_agents, 2))
        self.stats: Dict[str, int] = defaultdict(int)

    @property
    def filter_tau(self) -> Optional[float]:
        if self.policy.kind is PolicyKind.PCCA_FILTER:
            return self.policy.tau or self.cfg.filter_tau
        return None

    def step(self, world: WorldState) -> StepOutcome:
        kind = self.policy.kind
        if kind in (PolicyKind.PCCA_DELAY, PolicyKind.PCCA_FILTER):
            outcome = pcca_step(world, self.goals, self.cfg, self.pcca_states, self.applied_prev, self.filter_tau)
            self.pcca_states = outcome.states
        else:
            outcome = _STATELESS[kind](world, self.goals, self.cfg)

        if self.non_cooperating:
            outcome = self._override(world, outcome)

        self.applied_prev = outcome.controls.copy()
        self.stats["steps"] += 1
        if outcome.any_infeasible:
            self.stats["infeasible_steps"] += 1
        if outcome.braked:
            self.stats["braked_steps"] += 1
        return outcome

    def _override(self, world: WorldState, outcome: StepOutcome) -> StepOutcome:
        u0 = baseline_controls(world.positions, world.velocities, self.goals, self.gain)
        controls = outcome.controls.copy()
        feasible = list(outcome.per_agent_feasible)
        violation = list(outcome.per_agent_violation)
        for i in self.non_cooperating:
            controls[i] = u0[i]
            feasible[i] = True
            violation[i] = 0.0
        return dataclasses.replace(
            outcome,
            controls=controls,
            per_agent_feasible=tuple(feasible),
            per_agent_violation=tuple(violation),
            worst_violation=max(violation, default=0.0),
        )
