"""
Small dense QP solver for the barrier-constrained control problems.

Every controller QP here has the form

    min_u  1/2 ||u - u0||^2 + 1/2 sum_k rho_k s_k^2
    s.t.   g_k u + lo_k + s_k >= 0    (s_k only on relaxed rows)

which has the same minimizer as ||u - u0||^2 + rho sum s^2. Scaling each
slack to z_k = sqrt(rho_k) s_k turns it into a Euclidean projection of
(u0, 0) onto a polyhedron, so one identity-Hessian active-set routine
serves the exact and the relaxed problems alike.

Soft rows (the outer wall) always carry a slack with weight RHO_SOFT.
Hard rows are exact; if they conflict the problem is re-solved with
RHO_HARD slacks on them and the solution is flagged infeasible. That
relaxed answer is the "least infeasible" control.

Two neighbours on opposite sides of an agent give nearly antiparallel hard
rows. Their feasible set is then a thin sliver whose exact minimizer sits
far out along it, reached only because huge opposing multipliers almost
cancel. Such a solution is rejected (see cancellation_ratio) and handled
as a conflict. In the relaxed problem the weakly constrained direction of
the cancelling rows is frozen at u0 (see sliver_direction), so the answer
only trades off violation along the directions the rows actually control.

Multipliers reported in QpSolution use the 1/2-scaled cost above.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .errors import QpInputError, QpSolverError

logger = logging.getLogger(__name__)

RHO_HARD = 1e6
RHO_SOFT = 1e4

FEAS_TOL = 1e-10
KKT_TOL = 1e-8
# ||d||^2 <= DEP_TOL ||n_p||^2 means the entering row is dependent on the active rows
DEP_TOL = 1e-14
ITERATIONS_PER_ROW = 100

# Hard-row forces summing to less than 1/CONDITION_LIMIT of their total size
# mark a sliver; singular values below sigma_max/CONDITION_LIMIT are weak
CONDITION_LIMIT = 1e2
# Net force floor, relative to 1 + |u0|
NET_FLOOR = 1e-6
# Singular values below this fraction of sigma_max are exact null directions
RANK_TOL = 1e-12
NEWTON_MAX_ITER = 200


@dataclass(frozen=True, eq=False)
class QpProblem:
    """
    min ||u - cost_center||^2 subject to coefs[k] @ u + lo[k] >= 0.

    `hard[k]` False marks a soft (slack-penalized) row.
    """
    cost_center: NDArray[np.float64]
    coefs: NDArray[np.float64]
    lo: NDArray[np.float64]
    hard: NDArray[np.bool_]

    @property
    def dim(self) -> int:
        return self.cost_center.shape[0]

    @property
    def n_rows(self) -> int:
        return self.lo.shape[0]

    @classmethod
    def build(
        cls,
        cost_center: Sequence[float],
        rows: Sequence[Tuple[Sequence[float], float]] = (),
        hard: Optional[Sequence[bool]] = None,
    ) -> "QpProblem":
        """Build from (coef, lo) pairs; rows default to hard."""
        u0 = np.atleast_1d(np.asarray(cost_center, dtype=float))
        n = u0.shape[0]
        coefs = np.array([np.asarray(c, dtype=float) for c, _ in rows], dtype=float).reshape(-1, n)
        lo = np.array([float(l) for _, l in rows], dtype=float)
        mask = np.ones(len(rows), dtype=bool) if hard is None else np.asarray(hard, dtype=bool)
        return cls(u0, coefs, lo, mask)


@dataclass(frozen=True, eq=False)
class QpSolution:
    u_star: NDArray[np.float64]
    feasible: bool
    max_violation: float            # worst hard-row violation, 0 when feasible
    active_set: Tuple[int, ...]
    kkt_residual: float
    multipliers: NDArray[np.float64]
    slacks: NDArray[np.float64]     # physical slack per row, 0 on unrelaxed rows
    soft_violation: float           # worst soft-row violation
    relaxed_hard: bool              # phase 2 was used
    iterations: int
    frozen: NDArray[np.float64]     # orthonormal rows; u - u0 is kept orthogonal to them


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def worst(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    def ok(self, tol: float = KKT_TOL) -> bool:
        return self.worst <= tol


def _validate(problem: QpProblem) -> None:
    u0, coefs, lo, hard = problem.cost_center, problem.coefs, problem.lo, problem.hard
    if u0.ndim != 1 or u0.shape[0] < 1:
        raise QpInputError(f"cost center must be a non-empty vector, got shape {u0.shape}")
    m = lo.shape[0]
    if coefs.shape != (m, u0.shape[0]):
        raise QpInputError(f"coef matrix shape {coefs.shape} does not match {m} rows x {u0.shape[0]} vars")
    if hard.shape != (m,):
        raise QpInputError(f"hard mask shape {hard.shape} does not match {m} rows")
    if not (np.all(np.isfinite(u0)) and np.all(np.isfinite(coefs)) and np.all(np.isfinite(lo))):
        raise QpInputError("QP data contains non-finite entries")


def _relaxed_rows(problem: QpProblem, relax_hard: bool) -> NDArray[np.intp]:
    if relax_hard:
        return np.arange(problem.n_rows)
    return np.flatnonzero(~problem.hard)


def _row_weights(problem: QpProblem, rows: NDArray[np.intp], rho_hard: float, rho_soft: float) -> NDArray[np.float64]:
    return np.where(problem.hard[rows], rho_hard, rho_soft)


def _augment(problem: QpProblem, relax_hard: bool, rho_hard: float, rho_soft: float):
    """Projection data (z0, N, c) with one scaled slack column per relaxed row."""
    n, m = problem.dim, problem.n_rows
    rows = _relaxed_rows(problem, relax_hard)
    rho = _row_weights(problem, rows, rho_hard, rho_soft)
    N = np.zeros((m, n + rows.shape[0]))
    N[:, :n] = problem.coefs
    N[rows, n + np.arange(rows.shape[0])] = 1.0 / np.sqrt(rho)
    z0 = np.concatenate([problem.cost_center, np.zeros(rows.shape[0])])
    return z0, N, problem.lo.copy(), rows, rho


def _dual_active_set(z0: NDArray, N: NDArray, c: NDArray, max_iter: int):
    """
    Project z0 onto {z : N z + c >= 0} with a dual active-set iteration.

    Starts from the unconstrained point and adds violated rows one at a
    time (lowest index first), dropping rows whose multiplier would turn
    negative. Returns (z, active, lam_active, iterations), or None when the
    entering row cannot be satisfied, which certifies infeasibility.
    """
    m = c.shape[0]
    z = z0.copy()
    active: List[int] = []
    lam = np.zeros(0)
    row_norms = np.linalg.norm(N, axis=1)
    iterations = 0

    while True:
        s = N @ z + c
        tol = FEAS_TOL * (1.0 + np.abs(c) + row_norms * np.linalg.norm(z))
        violated = s < -tol
        if active:
            violated[active] = False
        if not violated.any():
            return z, active, lam, iterations

        p = int(np.flatnonzero(violated)[0])
        n_p = N[p]
        lam_p = 0.0

        while True:
            iterations += 1
            if iterations > max_iter:
                raise QpSolverError(
                    f"active-set iteration cap {max_iter} exceeded",
                    {"rows": m, "active": list(active), "entering": p, "iterations": iterations},
                )

            if active:
                Q, R = np.linalg.qr(N[active].T)
                qn = Q.T @ n_p
                r = scipy.linalg.solve_triangular(R, qn)
                d = n_p - Q @ qn
            else:
                r = np.zeros(0)
                d = n_p
            dd = float(d @ d)

            # Largest dual step keeping active multipliers nonnegative; ties to lowest row index
            t1 = math.inf
            block = -1
            r_tol = 1e-12 * (1.0 + float(np.abs(r).max(initial=0.0)))
            for idx in sorted(range(len(active)), key=active.__getitem__):
                if r[idx] > r_tol:
                    ratio = lam[idx] / r[idx]
                    if ratio < t1:
                        t1 = ratio
                        block = idx

            if dd <= DEP_TOL * float(n_p @ n_p):
                if block < 0:
                    return None
                lam = lam - t1 * r
                lam_p += t1
                lam = np.delete(lam, block)
                del active[block]
                continue

            t2 = -float(n_p @ z + c[p]) / dd
            if t2 <= t1:
                z = z + t2 * d
                lam = np.append(lam - t2 * r, lam_p + t2)
                active.append(p)
                break

            z = z + t1 * d
            lam = lam - t1 * r
            lam_p += t1
            lam = np.delete(lam, block)
            del active[block]


def _polish(z0: NDArray, N: NDArray, c: NDArray, active: List[int], z: NDArray, lam: NDArray):
    """Recompute z and multipliers from the final active set by one direct solve."""
    if not active:
        return z0.copy(), lam
    A = N[active]
    # QR of A^T keeps the conditioning of A instead of squaring it
    Q, R = np.linalg.qr(A.T)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-12 * diag.max():
        return z, lam
    y = scipy.linalg.solve_triangular(R.T, -(A @ z0 + c[active]), lower=True)
    lam_exact = scipy.linalg.solve_triangular(R, y)
    if np.any(lam_exact < -FEAS_TOL * (1.0 + np.abs(lam_exact).max())):
        return z, lam
    return z0 + Q @ y, np.maximum(lam_exact, 0.0)


def _solve_formulation(problem: QpProblem, relax_hard: bool, rho_hard: float, rho_soft: float):
    z0, N, c, rows, rho = _augment(problem, relax_hard, rho_hard, rho_soft)
    max_iter = ITERATIONS_PER_ROW * max(problem.n_rows, 1)
    result = _dual_active_set(z0, N, c, max_iter)
    if result is None:
        return None
    z, active, lam, iterations = result
    z, lam = _polish(z0, N, c, active, z, lam)
    n = problem.dim
    multipliers = np.zeros(problem.n_rows)
    multipliers[active] = lam
    slacks = np.zeros(problem.n_rows)
    slacks[rows] = z[n:] / np.sqrt(rho)
    return z[:n], tuple(sorted(active)), multipliers, slacks, iterations


def _package(
    problem: QpProblem,
    parts,
    relaxed_hard: bool,
    rho_hard: float,
    rho_soft: float,
    frozen: Optional[NDArray[np.float64]] = None,
) -> QpSolution:
    u, active, multipliers, slacks, iterations = parts
    values = problem.coefs @ u + problem.lo
    shortfall = np.maximum(0.0, -values)
    hard_short = shortfall[problem.hard]
    soft_short = shortfall[~problem.hard]
    max_violation = float(hard_short.max()) if relaxed_hard and hard_short.size else 0.0
    draft = QpSolution(
        u_star=u,
        feasible=not relaxed_hard,
        max_violation=max_violation,
        active_set=active,
        kkt_residual=0.0,
        multipliers=multipliers,
        slacks=slacks,
        soft_violation=float(soft_short.max()) if soft_short.size else 0.0,
        relaxed_hard=relaxed_hard,
        iterations=iterations,
        frozen=np.zeros((0, problem.dim)) if frozen is None else frozen,
    )
    report = verify_kkt(problem, draft, rho_hard=rho_hard, rho_soft=rho_soft)
    return dataclasses.replace(draft, kkt_residual=report.worst)


def _structurally_infeasible(problem: QpProblem) -> bool:
    zero_rows = ~np.any(problem.coefs != 0.0, axis=1)
    return bool(np.any(zero_rows & problem.hard & (problem.lo < 0)))


def cancellation_ratio(problem: QpProblem, multipliers: NDArray[np.float64]) -> float:
    """
    Total hard-row force over net hard-row force.

    sum_k lam_k ||g_k|| / ||sum_k lam_k g_k|| is about 1 when the active rows
    push the same way and blows up when nearly opposite rows balance each
    other with large multipliers.
    """
    on = problem.hard & (multipliers > 0.0)
    if not on.any():
        return 1.0
    lam = multipliers[on]
    G = problem.coefs[on]
    push = float(lam @ np.linalg.norm(G, axis=1))
    if push <= 0.0:
        return 1.0
    net = float(np.linalg.norm(G.T @ lam))
    floor = NET_FLOOR * (1.0 + float(np.abs(problem.cost_center).max()))
    return push / max(net, floor)


def sliver_direction(problem: QpProblem, multipliers: NDArray[np.float64]) -> NDArray[np.float64]:
    """
    Directions the cancelling hard rows barely constrain, as orthonormal rows.

    Empty unless cancellation_ratio exceeds CONDITION_LIMIT. Otherwise the
    right singular vectors of the loaded hard rows whose singular value is
    weak (below sigma_max / CONDITION_LIMIT) but not an exact null direction.
    """
    empty = np.zeros((0, problem.dim))
    if cancellation_ratio(problem, multipliers) <= CONDITION_LIMIT:
        return empty
    on = problem.hard & (multipliers > 0.0)
    count = min(int(on.sum()), problem.dim)
    if count < 2:
        return empty
    _, sigma, vt = np.linalg.svd(problem.coefs[on])
    sigma = sigma[:count]
    weak = (sigma < sigma[0] / CONDITION_LIMIT) & (sigma > sigma[0] * RANK_TOL)
    return vt[:count][weak]


def _penalty_newton(problem: QpProblem, rho_hard: float, rho_soft: float):
    """
    Fully relaxed problem with the slacks eliminated, by semismooth Newton.

    1/2 ||u - u0||^2 + 1/2 sum_k rho_k max(0, -(g_k u + lo_k))^2 is strongly
    convex and piecewise quadratic. A full Newton step that keeps the set of
    violated rows unchanged lands on the exact minimizer.
    """
    u0, G, lo = problem.cost_center, problem.coefs, problem.lo
    rho = np.where(problem.hard, rho_hard, rho_soft)
    grad_tol = 1e-2 * KKT_TOL * (1.0 + float(np.abs(u0).max()))

    def evaluate(u):
        short = np.maximum(0.0, -(G @ u + lo))
        return 0.5 * float((u - u0) @ (u - u0)) + 0.5 * float(rho @ short**2), short

    u = u0.copy()
    f, short = evaluate(u)
    converged = False
    iterations = 0
    while iterations < NEWTON_MAX_ITER:
        grad = u - u0 - G.T @ (rho * short)
        if float(np.abs(grad).max()) <= grad_tol:
            converged = True
            break
        iterations += 1
        on = short > 0.0
        H = np.eye(problem.dim) + (G[on].T * rho[on]) @ G[on]
        step = -scipy.linalg.solve(H, grad, assume_a="pos")
        slope = float(grad @ step)
        t = 1.0
        while t >= 1e-12:
            f_next, short_next = evaluate(u + t * step)
            if f_next <= f + 1e-4 * t * slope + 1e-14 * (1.0 + abs(f)):
                break
            t *= 0.5
        else:
            break
        u = u + t * step
        f, short = f_next, short_next
        if t == 1.0 and np.array_equal(short > 0.0, on):
            converged = True
            break

    if not converged:
        raise QpSolverError(
            "relaxed problem did not converge",
            {"rows": problem.n_rows, "dim": problem.dim, "iterations": iterations},
        )
    active = tuple(int(k) for k in np.flatnonzero(short > 0.0))
    return u, active, rho * short, short, iterations


def _relaxed_parts(problem: QpProblem, rho_hard: float, rho_soft: float):
    try:
        parts = _solve_formulation(problem, True, rho_hard, rho_soft)
    except QpSolverError as e:
        logger.warning("relaxed active set failed (%s); switching to penalty Newton", e)
        return _penalty_newton(problem, rho_hard, rho_soft)
    if parts is None:
        logger.warning("relaxed active set reported a dependent row; switching to penalty Newton")
        return _penalty_newton(problem, rho_hard, rho_soft)
    return parts


def _solve_restricted(
    problem: QpProblem, frozen: NDArray[np.float64], iterations: int, rho_hard: float, rho_soft: float,
) -> QpSolution:
    """Re-solve over u0 + span(basis) where basis spans the complement of the frozen rows."""
    basis = scipy.linalg.null_space(frozen)
    u0 = problem.cost_center
    restricted = QpProblem(np.zeros(basis.shape[1]), problem.coefs @ basis, problem.coefs @ u0 + problem.lo, problem.hard)
    inner = solve_relaxed(restricted, rho_hard, rho_soft)
    parts = (u0 + basis @ inner.u_star, inner.active_set, inner.multipliers, inner.slacks, iterations + inner.iterations)
    frozen = np.vstack([frozen, inner.frozen @ basis.T])
    return _package(problem, parts, inner.relaxed_hard, rho_hard, rho_soft, frozen)


def solve_relaxed(problem: QpProblem, rho_hard: float = RHO_HARD, rho_soft: float = RHO_SOFT) -> QpSolution:
    """
    Least-infeasible solution.

    Soft rows are always slack-penalized (rho_soft). If the hard rows admit
    a well-posed solution it is returned exactly (feasible=True, zero hard
    slacks); otherwise every hard row gets a rho_hard slack and the relaxed
    minimizer is returned with feasible=False and max_violation = largest
    hard violation. Sliver directions found in the relaxed answer are frozen
    and the problem is re-solved without them.
    """
    _validate(problem)
    if not _structurally_infeasible(problem):
        parts = _solve_formulation(problem, False, rho_hard, rho_soft)
        if parts is not None:
            ratio = cancellation_ratio(problem, parts[2])
            if ratio <= CONDITION_LIMIT:
                return _package(problem, parts, False, rho_hard, rho_soft)
            logger.debug("hard rows nearly cancel (ratio %.3g); treating them as conflicting", ratio)

    logger.debug("hard rows conflict (%d rows, dim %d); solving relaxed problem", problem.n_rows, problem.dim)
    parts = _relaxed_parts(problem, rho_hard, rho_soft)
    frozen = sliver_direction(problem, parts[2])
    if frozen.shape[0] == 0:
        return _package(problem, parts, True, rho_hard, rho_soft)
    logger.debug("freezing %d sliver direction(s)", frozen.shape[0])
    return _solve_restricted(problem, frozen, parts[4], rho_hard, rho_soft)


def solve(problem: QpProblem) -> QpSolution:
    """
    Minimize ||u - u0||^2 (+ soft-row penalty) subject to the hard rows.

    Falls back to the relaxed problem when the hard rows conflict; the
    returned solution then has feasible=False. Identical inputs give
    bitwise-identical outputs.
    """
    return solve_relaxed(problem, RHO_HARD, RHO_SOFT)


def verify_kkt(
    problem: QpProblem,
    solution: QpSolution,
    rho_hard: float = RHO_HARD,
    rho_soft: float = RHO_SOFT,
) -> KktReport:
    """
    Check the KKT conditions of the problem that was actually solved.

    Works only from the returned u, multipliers and slacks. Residuals are
    scaled by the problem's magnitude so one tolerance fits all rows.
    Stationarity is only required off the frozen directions, and u - u0
    must have no component along them.
    """
    u = solution.u_star
    u0 = problem.cost_center
    lam = solution.multipliers
    s = solution.slacks
    G = problem.coefs
    F = solution.frozen
    relaxed = np.zeros(problem.n_rows, dtype=bool)
    relaxed[_relaxed_rows(problem, solution.relaxed_hard)] = True
    rho = np.where(problem.hard, rho_hard, rho_soft)

    lam_scale = 1.0 + float(np.abs(lam).max(initial=0.0))
    lo_scale = 1.0 + float(np.abs(problem.lo).max(initial=0.0))
    u0_scale = 1.0 + float(np.abs(u0).max())

    # Largest single row force sets the roundoff level of G^T lam
    force_scale = float((np.abs(lam) * np.linalg.norm(G, axis=1)).max(initial=0.0))
    grad = u - u0 - G.T @ lam
    if F.shape[0]:
        grad = grad - F.T @ (F @ grad)
    stationarity = float(np.abs(grad).max()) / (u0_scale + force_scale)
    if relaxed.any():
        slack_grad = rho[relaxed] * s[relaxed] - lam[relaxed]
        stationarity = max(stationarity, float(np.abs(slack_grad).max()) / lam_scale)
    if np.any(s[~relaxed] != 0.0):
        stationarity = max(stationarity, float(np.abs(s[~relaxed]).max()))

    values = G @ u + problem.lo + s
    primal = float(np.maximum(0.0, -values).max(initial=0.0)) / lo_scale
    if F.shape[0]:
        primal = max(primal, float(np.abs(F @ (u - u0)).max()) / u0_scale)
    dual = float(np.maximum(0.0, -lam).max(initial=0.0)) / lam_scale
    complementarity = float(np.abs(lam * values).max(initial=0.0)) / (lam_scale * lo_scale)
    return KktReport(stationarity, primal, dual, complementarity)
