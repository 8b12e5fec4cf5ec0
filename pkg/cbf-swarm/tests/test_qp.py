"""
Tests for the dense QP solver.

The reference is a brute-force oracle: enumerate every candidate active
set, solve its equality-constrained projection, and keep the one that is
primal and dual feasible. For a strictly convex problem that point is the
unique minimizer. reference_solution applies the solver's sliver rules on
top of it: an exact answer held up by cancelling rows counts as a
conflict, and weak directions of the relaxed answer are frozen.
"""

from itertools import combinations

import numpy as np
import pytest
import scipy.linalg

from cbf_swarm import qp
from cbf_swarm.errors import QpInputError, QpSolverError
from cbf_swarm.qp import (
    CONDITION_LIMIT,
    RHO_HARD,
    RHO_SOFT,
    QpProblem,
    cancellation_ratio,
    sliver_direction,
    solve,
    solve_relaxed,
    verify_kkt,
)


def enumerate_projection(z0, N, c):
    """Projection of z0 onto {N z + c >= 0} and its multipliers, or None if empty."""
    m = c.shape[0]
    for k in range(min(m, N.shape[1]) + 1):
        for S in combinations(range(m), k):
            lam_full = np.zeros(m)
            if S:
                A = N[list(S)]
                Q, R = np.linalg.qr(A.T)
                diag = np.abs(np.diag(R))
                if diag.min() <= 1e-10 * diag.max():
                    continue
                y = np.linalg.solve(R.T, -(A @ z0 + c[list(S)]))
                lam = np.linalg.solve(R, y)
                if np.any(lam < -1e-9 * (1 + np.abs(lam).max())):
                    continue
                z = z0 + Q @ y
                lam_full[list(S)] = np.maximum(lam, 0.0)
            else:
                z = z0.copy()
            if np.all(N @ z + c >= -1e-9 * (1 + np.abs(c).max(initial=0.0))):
                return z, lam_full
    return None


def oracle(problem: QpProblem, relax_hard: bool):
    """(u, multipliers) of the exact (soft rows slacked) or fully relaxed problem."""
    n, m = problem.dim, problem.n_rows
    relaxed = np.ones(m, dtype=bool) if relax_hard else ~problem.hard
    rows = np.flatnonzero(relaxed)
    rho = np.where(problem.hard[rows], RHO_HARD, RHO_SOFT)
    N = np.zeros((m, n + rows.size))
    N[:, :n] = problem.coefs
    N[rows, n + np.arange(rows.size)] = 1.0 / np.sqrt(rho)
    z0 = np.concatenate([problem.cost_center, np.zeros(rows.size)])
    found = enumerate_projection(z0, N, problem.lo)
    if found is None:
        return None
    z, lam = found
    return z[:n], lam


def reference_solution(problem: QpProblem):
    """(u, feasible) that solve() should return."""
    exact = oracle(problem, relax_hard=False)
    if exact is not None and cancellation_ratio(problem, exact[1]) <= CONDITION_LIMIT:
        return exact[0], True
    u, lam = oracle(problem, relax_hard=True)
    frozen = sliver_direction(problem, lam)
    if frozen.shape[0] == 0:
        return u, False
    basis = scipy.linalg.null_space(frozen)
    u0 = problem.cost_center
    restricted = QpProblem(np.zeros(basis.shape[1]), problem.coefs @ basis, problem.coefs @ u0 + problem.lo, problem.hard)
    y, feasible = reference_solution(restricted)
    return u0 + basis @ y, feasible


def random_problem(rng, max_dim=6, max_rows=10, soft_fraction=0.2):
    n = int(rng.integers(1, max_dim + 1))
    m = int(rng.integers(0, max_rows + 1))
    coefs = rng.normal(size=(m, n))
    lo = rng.normal(size=m) * 2.0
    if m >= 2 and rng.random() < 0.3:
        # Make two rows contradict each other
        coefs[1] = -coefs[0]
        lo[1] = -lo[0] - 1.0 - rng.random()
    hard = rng.random(m) >= soft_fraction
    return QpProblem(rng.normal(size=n) * 2.0, coefs, lo, hard)


def sandwich_problem(rng, tilt, max_dim=4, max_rows=6):
    """Random problem whose first two hard rows are nearly antiparallel and both demand a push."""
    n = int(rng.integers(2, max_dim + 1))
    m = int(rng.integers(2, max_rows + 1))
    coefs = rng.normal(size=(m, n))
    lo = rng.normal(size=m) * 2.0
    side = rng.normal(size=n)
    side -= (side @ coefs[0]) / (coefs[0] @ coefs[0]) * coefs[0]
    side *= np.linalg.norm(coefs[0]) / np.linalg.norm(side)
    coefs[1] = -coefs[0] + tilt * side
    lo[:2] = -1.0 - rng.random(2)
    hard = rng.random(m) >= 0.2
    hard[:2] = True
    return QpProblem(rng.normal(size=n), coefs, lo, hard)


def check_against_oracle(problem):
    sol = solve(problem)
    expected, feasible = reference_solution(problem)
    assert sol.feasible == feasible
    np.testing.assert_allclose(sol.u_star, expected, atol=1e-8 * (1 + np.abs(expected).max()), rtol=0)
    assert verify_kkt(problem, sol).ok(1e-8)
    assert sol.kkt_residual <= 1e-8


def sandwiched_agent_problem():
    """Agent between two neighbours on opposite sides, both rows demanding a push."""
    return QpProblem.build(
        [0.0005, 0.0021],
        [([11.9486, -3.1423], -9.3447), ([-11.9486, 3.1421], -9.3545)],
    )


class TestSolveExamples:

    def test_projection_onto_halfline(self):
        sol = solve(QpProblem.build([1.0], [([-1.0], 0.0)]))
        assert sol.feasible
        assert sol.u_star[0] == pytest.approx(0.0, abs=1e-12)
        assert sol.active_set == (0,)
        assert sol.max_violation == 0.0

    def test_nearest_point_on_halfplane(self):
        sol = solve(QpProblem.build([0.0, 0.0], [([1.0, 0.0], -2.0)]))
        assert sol.feasible
        np.testing.assert_allclose(sol.u_star, [2.0, 0.0], atol=1e-12)

    def test_unconstrained(self):
        sol = solve(QpProblem.build([1.5, -2.0]))
        np.testing.assert_array_equal(sol.u_star, [1.5, -2.0])
        assert sol.active_set == ()

    def test_inactive_row(self):
        sol = solve(QpProblem.build([1.0, 1.0], [([1.0, 0.0], 5.0)]))
        np.testing.assert_allclose(sol.u_star, [1.0, 1.0])
        assert sol.active_set == ()
        assert sol.multipliers[0] == 0.0

    def test_conflicting_rows_give_least_infeasible(self):
        p = QpProblem.build([0.0, 0.0], [([1.0, 0.0], -1.0), ([-1.0, 0.0], -1.0)])
        sol = solve(p)
        assert not sol.feasible
        assert sol.relaxed_hard
        assert sol.u_star[0] == pytest.approx(0.0, abs=1e-9)
        assert sol.max_violation == pytest.approx(1.0, rel=1e-5)

    def test_zero_row_with_negative_constant_is_infeasible(self):
        p = QpProblem.build([1.0, 2.0], [([0.0, 0.0], -1.0), ([1.0, 0.0], 0.0)])
        sol = solve(p)
        assert not sol.feasible
        assert sol.max_violation > 0.99

    def test_zero_row_with_nonnegative_constant_is_kept(self):
        p = QpProblem.build([1.0, 2.0], [([0.0, 0.0], 0.0), ([0.0, 0.0], 3.0)])
        sol = solve(p)
        assert sol.feasible
        np.testing.assert_allclose(sol.u_star, [1.0, 2.0])

    def test_duplicate_rows(self):
        row = ([1.0, 1.0], -2.0)
        sol = solve(QpProblem.build([0.0, 0.0], [row, row, row]))
        assert sol.feasible
        np.testing.assert_allclose(sol.u_star, [1.0, 1.0], atol=1e-10)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        p = random_problem(rng)
        a, b = solve(p), solve(p)
        np.testing.assert_array_equal(a.u_star, b.u_star)
        assert a.active_set == b.active_set



    def test_sandwiched_agent_gets_bounded_least_infeasible_control(self):
        p = sandwiched_agent_problem()
        sol = solve(p)
        assert not sol.feasible
        assert np.linalg.norm(sol.u_star) < 0.01
        assert sol.max_violation == pytest.approx(9.35, abs=0.01)
        assert sol.frozen.shape == (1, 2)
        assert verify_kkt(p, sol).ok()

    @pytest.mark.parametrize("tilt", [1e-8, 1e-6, 1e-5, 1e-4, 1e-3])
    def test_nearly_antiparallel_rows_stay_bounded(self, tilt):
        n, side = np.array([3.0, 4.0]), np.array([-4.0, 3.0])
        p = QpProblem.build([0.2, -0.1], [(n, -1.0), (-n + tilt * side, -1.5)])
        sol = solve(p)
        assert not sol.feasible
        assert np.linalg.norm(sol.u_star - p.cost_center) <= (1.0 + 1.5) / 5.0
        assert sol.max_violation == pytest.approx(1.25, rel=1e-3)
        assert verify_kkt(p, sol).ok()

    def test_well_separated_opposing_rows_are_not_frozen(self):
        # Rows 120 degrees apart cancel but every direction is well constrained
        angles = np.deg2rad([90.0, 210.0, 330.0])
        rows = [((np.cos(a), np.sin(a)), -1.0) for a in angles]
        sol = solve(QpProblem.build([0.1, 0.0], rows))
        assert not sol.feasible
        assert sol.frozen.shape == (0, 2)
        assert np.linalg.norm(sol.u_star) < 0.2


class TestSolveRelaxed:

    def test_soft_row_closed_form(self):
        p = QpProblem.build([0.0, 0.0], [([1.0, 0.0], -3.0)], hard=[False])
        sol = solve_relaxed(p)
        assert sol.feasible
        assert sol.u_star[0] == pytest.approx(3 * RHO_SOFT / (1 + RHO_SOFT), rel=1e-12)
        assert sol.slacks[0] == pytest.approx(3 / (1 + RHO_SOFT), rel=1e-9)
        assert sol.soft_violation == pytest.approx(3 / (1 + RHO_SOFT), rel=1e-9)

    def test_feasible_problem_matches_solve(self):
        p = QpProblem.build([0.0, 0.0], [([1.0, 0.0], -2.0), ([0.0, 1.0], 1.0)])
        relaxed = solve_relaxed(p)
        exact = solve(p)
        np.testing.assert_array_equal(relaxed.u_star, exact.u_star)
        np.testing.assert_array_equal(relaxed.slacks, 0.0)

    def test_larger_rho_drives_symmetric_conflict_to_center(self):
        p = QpProblem.build([0.3, 0.0], [([1.0, 0.0], -1.0), ([-1.0, 0.0], -1.0)])
        loose = solve_relaxed(p, rho_hard=1e2)
        tight = solve_relaxed(p, rho_hard=1e6)
        assert abs(tight.u_star[0]) < abs(loose.u_star[0])
        assert abs(tight.u_star[0]) < 1e-6

    def test_kkt_of_relaxed_problem(self):
        p = QpProblem.build([1.0, -1.0], [([1.0, 0.0], -1.0), ([-1.0, 0.0], -1.0), ([0.0, 1.0], 0.0)])
        sol = solve(p)
        assert not sol.feasible
        assert verify_kkt(p, sol).ok()



    def test_relaxed_falls_back_to_penalty_newton(self, monkeypatch, caplog):
        original = qp._solve_formulation

        def failing(problem, relax_hard, rho_hard, rho_soft):
            if relax_hard:
                raise QpSolverError("cap", {})
            return original(problem, relax_hard, rho_hard, rho_soft)

        monkeypatch.setattr(qp, "_solve_formulation", failing)
        angles = np.deg2rad([80.0, 200.0, 320.0])
        p = QpProblem.build([0.3, -0.2], [((np.cos(a), np.sin(a)), -1.0 - 0.1 * k) for k, a in enumerate(angles)])
        with caplog.at_level("WARNING", logger="cbf_swarm.qp"):
            sol = solve(p)
        assert "penalty Newton" in caplog.text
        assert not sol.feasible
        expected, _ = oracle(p, relax_hard=True)
        np.testing.assert_allclose(sol.u_star, expected, atol=1e-8)
        assert verify_kkt(p, sol).ok()

    def test_penalty_newton_matches_active_set(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            p = random_problem(rng, max_dim=4, max_rows=8)
            u, _, multipliers, slacks, _ = qp._penalty_newton(p, RHO_HARD, RHO_SOFT)
            expected, lam = oracle(p, relax_hard=True)
            np.testing.assert_allclose(u, expected, atol=1e-8 * (1 + np.abs(expected).max()), rtol=0)
            np.testing.assert_allclose(multipliers, RHO_HARD * slacks * p.hard + RHO_SOFT * slacks * ~p.hard)


class TestSliverRules:

    def test_rows_pushing_together_do_not_cancel(self):
        p = QpProblem.build([0.0, 0.0], [([1.0, 0.0], -1.0), ([1.0, 0.1], -1.0)])
        assert cancellation_ratio(p, np.array([1.0, 2.0])) == pytest.approx(1.0, rel=0.01)

    def test_opposing_rows_cancel(self):
        p = QpProblem.build([0.0, 0.0], [([1.0, 0.0], -1.0), ([-1.0, 1e-4], -1.0)])
        assert cancellation_ratio(p, np.array([1e4, 1e4])) > CONDITION_LIMIT

    def test_soft_rows_are_ignored(self):
        p = QpProblem.build([0.0, 0.0], [([1.0, 0.0], -1.0), ([-1.0, 1e-4], -1.0)], hard=[True, False])
        assert cancellation_ratio(p, np.array([1e4, 1e4])) == 1.0
        assert sliver_direction(p, np.array([1e4, 1e4])).shape == (0, 2)

    def test_sliver_direction_is_the_weak_axis(self):
        p = QpProblem.build([0.0, 0.0], [([1.0, 0.0], -1.0), ([-1.0, 1e-4], -1.0)])
        frozen = sliver_direction(p, np.array([1e4, 1e4]))
        assert frozen.shape == (1, 2)
        assert abs(frozen[0, 1]) == pytest.approx(1.0, abs=1e-6)

    def test_exact_antiparallel_rows_freeze_nothing(self):
        p = QpProblem.build([0.0, 0.0], [([1.0, 0.0], -1.0), ([-1.0, 0.0], -1.0)])
        assert sliver_direction(p, np.array([1e6, 1e6])).shape == (0, 2)


class TestInputValidation:

    def test_non_finite(self):
        with pytest.raises(QpInputError):
            solve(QpProblem.build([np.nan, 0.0], [([1.0, 0.0], 0.0)]))
        with pytest.raises(QpInputError):
            solve(QpProblem.build([0.0, 0.0], [([np.inf, 0.0], 0.0)]))

    def test_shape_mismatch(self):
        p = QpProblem(np.zeros(2), np.zeros((1, 3)), np.zeros(1), np.ones(1, dtype=bool))
        with pytest.raises(QpInputError):
            solve(p)

    def test_empty_cost_center(self):
        with pytest.raises(QpInputError):
            solve(QpProblem(np.zeros(0), np.zeros((0, 0)), np.zeros(0), np.zeros(0, dtype=bool)))


class TestVerifyKkt:

    def test_detects_wrong_answer(self):
        p = QpProblem.build([0.0, 0.0], [([1.0, 0.0], -2.0)])
        sol = solve(p)
        bad = type(sol)(**{**sol.__dict__, "u_star": np.array([1.0, 0.0])})
        assert not verify_kkt(p, bad).ok()

    def test_detects_negative_multiplier(self):
        p = QpProblem.build([0.0, 0.0], [([1.0, 0.0], -2.0)])
        sol = solve(p)
        bad = type(sol)(**{**sol.__dict__, "multipliers": -sol.multipliers})
        assert verify_kkt(p, bad).dual > 0


class TestOracleEquivalence:

    @pytest.mark.parametrize("seed", range(6))
    def test_small_random_problems(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(50):
            check_against_oracle(random_problem(rng, max_dim=4, max_rows=8))

    @pytest.mark.parametrize("tilt", [1e-8, 1e-6, 1e-5, 1e-4, 1e-3])
    def test_nearly_antiparallel_families(self, tilt):
        rng = np.random.default_rng(int(-np.log10(tilt)))
        for _ in range(30):
            p = sandwich_problem(rng, tilt)
            check_against_oracle(p)
            sol = solve(p)
            assert not sol.feasible or np.linalg.norm(sol.u_star - p.cost_center) < 1e3

    def test_mixed_feasibility_is_exercised(self):
        rng = np.random.default_rng(123)
        flags = [solve(random_problem(rng)).feasible for _ in range(200)]
        assert any(flags) and not all(flags)

    @pytest.mark.slow
    def test_ten_thousand_random_problems(self):
        rng = np.random.default_rng(2024)
        for _ in range(10_000):
            check_against_oracle(random_problem(rng, max_dim=6, max_rows=10))
