"""
Monte-Carlo harness: scenario sampling, trial execution, aggregation.

Trial k of a batch draws its scenario from RngStream(base_seed + k), and
that same scenario is run under every policy. Trials are independent, so
`run_batch` can fan them out over a process pool; results are sorted by
(policy, trial index) before aggregation so the report does not depend on
completion order.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .barrier import min_pair_h0
from .errors import ContractError, ScenarioError, TrialError
from .policies import DEFAULT_POLICIES, Controller, Policy
from .trace import TraceRecorder
from .world import ScenarioConfig, initial_world, step

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "PCG64"
MAX_RESAMPLES = 100_000
GRIDLOCK_WINDOW = 10.0      # seconds of near-zero speed at the end of a non-convergent run


class RngStream:
    """Seeded numpy PCG64 generator; the same seed gives the same draws on every platform."""

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        if seed < 0:
            raise ContractError(f"seed must be >= 0, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def uniform_disk(self, n: int, radius: float) -> np.ndarray:
        """n points uniform on the disk of the given radius, shape (n, 2)."""
        r = radius * np.sqrt(self.generator.random(n))
        theta = 2.0 * math.pi * self.generator.random(n)
        return np.column_stack([r * np.cos(theta), r * np.sin(theta)])

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, algorithm={self.algorithm})"


def _well_separated(points: np.ndarray, min_dist: float) -> bool:
    diff = points[:, None, :] - points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    iu = np.triu_indices(points.shape[0], k=1)
    return bool(np.all(d2[iu] >= min_dist * min_dist))


def sample_scenario(rng: RngStream, cfg: ScenarioConfig) -> ScenarioConfig:
    """
    Place starts and goals uniformly on the disk of radius R0 - r0.

    The whole configuration is redrawn until no two starts and no two goals
    are closer than 2 r0.

    Raises:
        ScenarioError: No acceptable configuration in MAX_RESAMPLES draws.
    """
    n = cfg.n_agents
    if n < 1:
        raise ContractError(f"n_agents must be >= 1, got {n}")
    min_dist = 2.0 * cfg.r0
    for attempt in range(1, MAX_RESAMPLES + 1):
        starts = rng.uniform_disk(n, cfg.wall_radius)
        goals = rng.uniform_disk(n, cfg.wall_radius)
        if _well_separated(starts, min_dist) and _well_separated(goals, min_dist):
            if attempt > 1:
                logger.debug("seed %d: accepted scenario after %d draws", rng.seed, attempt)
            return cfg.replace(
                starts=tuple(map(tuple, starts.tolist())),
                goals=tuple(map(tuple, goals.tolist())),
            )
    raise ScenarioError(
        f"no non-overlapping placement of {n} agents (r0={cfg.r0}, R0={cfg.R0}) "
        f"in {MAX_RESAMPLES} draws; configuration too crowded"
    )


def scenario_hash(cfg: ScenarioConfig) -> str:
    """sha256 over the exact start and goal coordinates."""
    payload = json.dumps({"starts": cfg.starts, "goals": cfg.goals})
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class TrialResult:
    seed: int
    policy: str
    converged: bool
    converge_time: Optional[float]
    h_min: float                        # +inf when there are no pairs
    infeasible_steps: int
    agent_infeasible_steps: Tuple[int, ...]
    braked_steps: int = 0
    gridlocked: bool = False
    radius_margin: float = 0.0
    scenario_hash: str = ""
    worst_qp_violation: float = 0.0
    trial: int = 0

    @property
    def had_infeasible(self) -> bool:
        return self.infeasible_steps > 0

    def to_record(self) -> Dict[str, Any]:
        """JSON-ready dict; an undefined h_min is written as null."""
        record = dataclasses.asdict(self)
        record["agent_infeasible_steps"] = list(self.agent_infeasible_steps)
        if not math.isfinite(self.h_min):
            record["h_min"] = None
        return record

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "TrialResult":
        data = dict(record)
        if data.get("h_min") is None:
            data["h_min"] = math.inf
        data["agent_infeasible_steps"] = tuple(data.get("agent_infeasible_steps", ()))
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def _at_goal(positions: np.ndarray, velocities: np.ndarray, goals: np.ndarray, cfg: ScenarioConfig) -> bool:
    pos_err = np.linalg.norm(positions - goals, axis=1)
    speed = np.linalg.norm(velocities, axis=1)
    return bool(np.all(pos_err < cfg.convergence_pos_tol) and np.all(speed < cfg.convergence_vel_tol))


def run_trial(
    scenario: ScenarioConfig,
    policy: Union[Policy, str],
    seed: int = 0,
    *,
    trial: int = 0,
    non_cooperating: Iterable[int] = (),
    recorder: Optional[TraceRecorder] = None,
) -> TrialResult:
    """
    Simulate one scenario under one policy for the full horizon.

    Convergence time is the first sample time at which every agent is
    within the position and speed tolerances. h_min is the smallest
    physical barrier (radius 2 r0, margin ignored) over all pairs and all
    sample instants including the initial one.

    Raises:
        TrialError: A solver or contract failure inside the trial.
    """
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    if not scenario.is_placed:
        raise ContractError("run_trial needs a scenario with starts and goals")

    try:
        return _simulate(scenario, policy, seed, trial, non_cooperating, recorder)
    except TrialError:
        raise
    except Exception as e:
        raise TrialError(seed, policy.label, e) from e


def _simulate(scenario, policy, seed, trial, non_cooperating, recorder) -> TrialResult:
    cfg = scenario
    controller = Controller(cfg, policy, non_cooperating=non_cooperating)
    goals = cfg.goal_array()
    world = initial_world(cfg)

    h_min = min_pair_h0(world.positions, cfg.r0)
    converge_time: Optional[float] = None
    agent_infeasible = np.zeros(cfg.n_agents, dtype=int)
    infeasible_steps = 0
    worst_violation = 0.0
    last_moving = 0.0

    for _ in range(cfg.n_steps):
        outcome = controller.step(world)
        if recorder is not None:
            recorder.record(world, outcome.controls)
        if outcome.any_infeasible:
            infeasible_steps += 1
            agent_infeasible += ~np.array(outcome.per_agent_feasible)
        worst_violation = max(worst_violation, outcome.worst_violation)

        world = step(world, outcome.controls, cfg.dt)
        h_min = min(h_min, min_pair_h0(world.positions, cfg.r0))
        if np.any(np.linalg.norm(world.velocities, axis=1) >= cfg.convergence_vel_tol):
            last_moving = world.time
        if converge_time is None and _at_goal(world.positions, world.velocities, goals, cfg):
            converge_time = world.time

    converged = converge_time is not None
    window = min(GRIDLOCK_WINDOW, cfg.horizon)
    gridlocked = not converged and world.time - last_moving >= window - 0.5 * cfg.dt
    if not converged:
        if gridlocked:
            logger.info("seed %d %s: gridlocked (no agent moved for the final %.0f s)", seed, policy.label, window)
        else:
            logger.warning("seed %d %s: did not converge and agents still moving at horizon", seed, policy.label)

    result = TrialResult(
        seed=seed,
        policy=policy.label,
        converged=converged,
        converge_time=converge_time,
        h_min=float(h_min),
        infeasible_steps=infeasible_steps,
        agent_infeasible_steps=tuple(int(x) for x in agent_infeasible),
        braked_steps=controller.stats["braked_steps"],
        gridlocked=bool(gridlocked),
        radius_margin=cfg.radius_margin,
        scenario_hash=scenario_hash(cfg),
        worst_qp_violation=float(worst_violation),
        trial=trial,
    )
    logger.info(
        "seed %d %s: converged=%s t=%s h_min=%.4g infeasible_steps=%d",
        seed, policy.label, converged, converge_time, h_min, infeasible_steps,
    )
    return result


@dataclass(frozen=True)
class AggregateRow:
    policy: str
    n_trials: int
    min_converge_time: Optional[float]
    max_converge_time: Optional[float]
    mean_converge_time: Optional[float]
    worst_h_min: Optional[float]
    no_converge: int
    infeasible_trials: int
    infeasible_steps: int
    radius_margin: float = 0.0

    @classmethod
    def of(cls, policy: str, results: Sequence[TrialResult]) -> "AggregateRow":
        times = [r.converge_time for r in results if r.converged]
        finite_h = [r.h_min for r in results if math.isfinite(r.h_min)]
        return cls(
            policy=policy,
            n_trials=len(results),
            min_converge_time=min(times) if times else None,
            max_converge_time=max(times) if times else None,
            mean_converge_time=statistics.fmean(times) if times else None,
            worst_h_min=min(finite_h) if finite_h else None,
            no_converge=sum(1 for r in results if not r.converged),
            infeasible_trials=sum(1 for r in results if r.had_infeasible),
            infeasible_steps=sum(r.infeasible_steps for r in results),
            radius_margin=max((r.radius_margin for r in results), default=0.0),
        )


AGGREGATE_COLUMNS = [
    "policy", "n_trials", "min_converge_time", "max_converge_time", "mean_converge_time",
    "worst_h_min", "no_converge", "infeasible_trials", "infeasible_steps", "radius_margin",
]


@dataclass(frozen=True)
class AggregateReport:
    """Per-policy summary rows plus every trial result behind them."""
    rows: Tuple[AggregateRow, ...]
    trials: Tuple[TrialResult, ...]
    policies: Tuple[Policy, ...] = ()
    template: Optional[ScenarioConfig] = None
    base_seed: int = 0
    n_trials: int = 0

    def row(self, policy: Union[Policy, str]) -> AggregateRow:
        label = policy.label if isinstance(policy, Policy) else Policy.parse(policy).label
        for r in self.rows:
            if r.policy == label:
                return r
        raise KeyError(label)

    def trials_for(self, policy: Union[Policy, str]) -> List[TrialResult]:
        label = policy.label if isinstance(policy, Policy) else Policy.parse(policy).label
        return [t for t in self.trials if t.policy == label]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(AGGREGATE_COLUMNS)
        for r in self.rows:
            writer.writerow(["" if v is None else v for v in (getattr(r, c) for c in AGGREGATE_COLUMNS)])
        return buf.getvalue()

    def render_text(self) -> str:
        """Aligned table: converge time min/max/mean, worst h_min, failure counts."""
        header = ["Policy", "min", "max", "mean", "h_min", "# no converge", "# infeasible", "margin"]

        def fmt(x: Optional[float], spec: str) -> str:
            return "-" if x is None else format(x, spec)

        body = [
            [
                r.policy,
                fmt(r.min_converge_time, ".2f"),
                fmt(r.max_converge_time, ".2f"),
                fmt(r.mean_converge_time, ".2f"),
                fmt(r.worst_h_min, ".3f"),
                str(r.no_converge),
                str(r.infeasible_trials),
                fmt(r.radius_margin, ".3f"),
            ]
            for r in self.rows
        ]
        widths = [max(len(line[c]) for line in [header] + body) for c in range(len(header))]
        lines = ["  ".join(h.ljust(w) if c == 0 else h.rjust(w) for c, (h, w) in enumerate(zip(header, widths)))]
        lines.append("  ".join("-" * w for w in widths))
        for line in body:
            lines.append("  ".join(v.ljust(w) if c == 0 else v.rjust(w) for c, (v, w) in enumerate(zip(line, widths))))
        return "\n".join(lines) + "\n"


def aggregate(
    trials: Iterable[TrialResult],
    policies: Sequence[Policy],
    template: Optional[ScenarioConfig] = None,
    base_seed: int = 0,
    n_trials: int = 0,
) -> AggregateReport:
    order = {p.label: k for k, p in enumerate(policies)}
    ordered = tuple(sorted(trials, key=lambda t: (order.get(t.policy, len(order)), t.trial, t.seed)))
    rows = tuple(AggregateRow.of(p.label, [t for t in ordered if t.policy == p.label]) for p in policies)
    return AggregateReport(rows, ordered, tuple(policies), template, base_seed, n_trials)


def _run_task(task) -> TrialResult:
    trial, seed, scenario, policy = task
    return run_trial(scenario, policy, seed, trial=trial)


def sample_batch(n_trials: int, cfg: ScenarioConfig, base_seed: int = 0) -> List[ScenarioConfig]:
    """Scenario for trial k drawn from seed base_seed + k."""
    return [sample_scenario(RngStream(base_seed + k), cfg) for k in range(n_trials)]


def run_batch(
    n_trials: int,
    policies: Sequence[Union[Policy, str]] = DEFAULT_POLICIES,
    cfg: Optional[ScenarioConfig] = None,
    base_seed: int = 0,
    *,
    workers: int = 1,
    margins: Optional[Mapping[str, float]] = None,
    on_result: Optional[Callable[[TrialResult], None]] = None,
) -> AggregateReport:
    """
    Run every policy on the same n_trials sampled scenarios.

    Args:
        n_trials: Number of scenarios.
        policies: Policies to compare (default: the six-variant set).
        cfg: Template config (its starts/goals are ignored).
        base_seed: Trial k uses seed base_seed + k.
        workers: Process count; 1 runs in-process.
        margins: Optional radius_margin per policy label.
        on_result: Called with each TrialResult as it finishes.

    Raises:
        TrialError: First failing trial, tagged with seed and policy.
    """
    if n_trials < 1:
        raise ContractError(f"n_trials must be >= 1, got {n_trials}")
    cfg = (cfg or ScenarioConfig()).replace(starts=(), goals=())
    policies = tuple(Policy.parse(p) if isinstance(p, str) else p for p in policies)
    margins = dict(margins or {})

    scenarios = sample_batch(n_trials, cfg, base_seed)
    tasks = []
    for policy in policies:
        margin = margins.get(policy.label, cfg.radius_margin)
        for k, scenario in enumerate(scenarios):
            tasks.append((k, base_seed + k, scenario.replace(radius_margin=margin), policy))

    results: List[TrialResult] = []
    if workers <= 1:
        for task in tasks:
            result = _run_task(task)
            results.append(result)
            if on_result:
                on_result(result)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(_run_task, tasks):
                results.append(result)
                if on_result:
                    on_result(result)

    return aggregate(results, policies, cfg, base_seed, n_trials)


def margin_for(row: AggregateRow) -> float:
    """|worst h_min| when it is negative, else 0."""
    if row.worst_h_min is None or row.worst_h_min >= 0:
        return 0.0
    return -row.worst_h_min


def margin_rerun(
    report: AggregateReport,
    cfg: Optional[ScenarioConfig] = None,
    *,
    workers: int = 1,
    on_result: Optional[Callable[[TrialResult], None]] = None,
) -> AggregateReport:
    """
    Rerun the identical scenario list with each policy's constraint radius
    enlarged by its own worst barrier violation (in h units).
    """
    if not report.trials or not report.policies:
        raise ContractError("margin rerun needs a report produced by run_batch")
    template = cfg or report.template or ScenarioConfig()
    margins = {r.policy: margin_for(r) for r in report.rows}
    for label, m in margins.items():
        logger.info("%s: radius margin %.4g", label, m)
    return run_batch(
        report.n_trials,
        report.policies,
        template,
        report.base_seed,
        workers=workers,
        margins=margins,
        on_result=on_result,
    )


def _trial_rows(report: AggregateReport) -> List[Dict[str, Any]]:
    by_trial: Dict[int, Dict[str, Any]] = {}
    for t in report.trials:
        row = by_trial.setdefault(t.trial, {"trial": t.trial, "seed": t.seed, "scenario_hash": t.scenario_hash})
        row[f"{t.policy}_converge_time"] = t.converge_time
        row[f"{t.policy}_h_min"] = t.h_min if math.isfinite(t.h_min) else None

    labels = [p.label for p in report.policies]
    for row in by_trial.values():
        times = [x for x in (row.get(f"{label}_converge_time") for label in labels) if x is not None]
        row["mean_converge_time"] = statistics.fmean(times) if times else None
        h_mins = [x for x in (row.get(f"{label}_h_min") for label in labels) if x is not None]
        row["mean_h_min"] = statistics.fmean(h_mins) if h_mins else None
    return list(by_trial.values())


def comparison_rows(report: AggregateReport) -> List[Dict[str, Any]]:
    """
    One row per trial with every policy's converge time and h_min side by side,
    sorted by the across-policy mean converge time, slowest first. Trials where
    no policy converged come last.
    """
    return sorted(
        _trial_rows(report),
        key=lambda r: (r["mean_converge_time"] is None, -(r["mean_converge_time"] or 0.0), r["trial"]),
    )


def hmin_comparison_rows(report: AggregateReport) -> List[Dict[str, Any]]:
    """The same rows sorted by the across-policy mean h_min, closest call first."""
    return sorted(
        _trial_rows(report),
        key=lambda r: (r["mean_h_min"] is None, r["mean_h_min"] or 0.0, r["trial"]),
    )


def comparison_columns(report: AggregateReport) -> List[str]:
    cols = ["trial", "seed", "scenario_hash", "mean_converge_time", "mean_h_min"]
    for p in report.policies:
        cols += [f"{p.label}_converge_time", f"{p.label}_h_min"]
    return cols
