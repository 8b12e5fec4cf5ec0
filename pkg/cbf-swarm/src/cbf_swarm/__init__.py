"""
cbf_swarm - barrier-function collision avoidance for double-integrator agents.

Builds the per-step quadratic programs of the centralized and decentralized
control policies, solves them with a small dense active-set solver, and runs
seeded Monte-Carlo comparisons of liveness, safety and feasibility.

Usage:
    from cbf_swarm import ScenarioConfig, run_batch

    report = run_batch(10, ["centralized", "pcca"], ScenarioConfig(), base_seed=0)
    print(report.render_text())
"""

from __future__ import annotations

from .baseline import LqrGain, baseline_control, baseline_controls, lqr_gain, numeric_lqr_gain
from .barrier import (
    BarrierDiagnostics,
    PairConstraint,
    WallConstraint,
    barrier_roots,
    diagnostics,
    min_pair_h0,
    pair_constraint,
    wall_constraint,
)
from .errors import (
    CbfSwarmError,
    ConfigError,
    ContractError,
    NotAdmissibleError,
    QpInputError,
    QpSolverError,
    ScenarioError,
    TrialError,
)
from .montecarlo import (
    AggregateReport,
    RngStream,
    TrialResult,
    comparison_rows,
    hmin_comparison_rows,
    margin_rerun,
    run_batch,
    run_trial,
    sample_scenario,
)
from .policies import (
    DEFAULT_POLICIES,
    Controller,
    PccaState,
    Policy,
    PolicyKind,
    StepOutcome,
    ccs2_step,
    centralized_step,
    dec_follower_step,
    dec_reciprocal_step,
    dr_brake_step,
    feasible_point_oracle,
    pcca_step,
)
from .presets import PRESETS, build_preset
from .qp import QpProblem, QpSolution, solve, solve_relaxed, verify_kkt
from .trace import TraceRecorder
from .world import AgentState, ScenarioConfig, WorldState, initial_world, relative_state, step

__version__ = "0.1.0"
__all__ = [
    "AgentState", "WorldState", "ScenarioConfig", "initial_world", "step", "relative_state",
    "PairConstraint", "WallConstraint", "BarrierDiagnostics",
    "barrier_roots", "pair_constraint", "wall_constraint", "diagnostics", "min_pair_h0",
    "QpProblem", "QpSolution", "solve", "solve_relaxed", "verify_kkt",
    "LqrGain", "lqr_gain", "numeric_lqr_gain", "baseline_control", "baseline_controls",
    "Policy", "PolicyKind", "PccaState", "StepOutcome", "Controller", "DEFAULT_POLICIES",
    "centralized_step", "dec_follower_step", "dec_reciprocal_step", "ccs2_step", "pcca_step",
    "dr_brake_step", "feasible_point_oracle",
    "RngStream", "TrialResult", "AggregateReport",
    "sample_scenario", "run_trial", "run_batch", "margin_rerun", "comparison_rows",
    "hmin_comparison_rows",
    "PRESETS", "build_preset", "TraceRecorder",
    "CbfSwarmError", "ConfigError", "ContractError", "QpInputError", "QpSolverError",
    "NotAdmissibleError", "ScenarioError", "TrialError",
]
