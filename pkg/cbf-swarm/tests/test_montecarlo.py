"""Tests for scenario sampling, trial execution and aggregation."""

import json
import math

import numpy as np
import pytest

from cbf_swarm import montecarlo
from cbf_swarm.errors import ContractError, QpSolverError, ScenarioError, TrialError
from cbf_swarm.montecarlo import (
    AggregateReport,
    AggregateRow,
    RngStream,
    TrialResult,
    aggregate,
    comparison_columns,
    comparison_rows,
    hmin_comparison_rows,
    margin_for,
    margin_rerun,
    run_batch,
    run_trial,
    sample_scenario,
    scenario_hash,
)
from cbf_swarm.policies import DEFAULT_POLICIES, Policy
from cbf_swarm.world import ScenarioConfig

SMALL = ScenarioConfig(n_agents=3, horizon=3.0)


def result(policy, trial, converge_time=None, h_min=0.5, infeasible_steps=0, **kw):
    return TrialResult(
        seed=trial,
        policy=policy,
        converged=converge_time is not None,
        converge_time=converge_time,
        h_min=h_min,
        infeasible_steps=infeasible_steps,
        agent_infeasible_steps=(infeasible_steps,),
        trial=trial,
        **kw,
    )


class TestRngStream:

    def test_algorithm_is_documented(self):
        assert RngStream(1).algorithm == "PCG64"

    def test_same_seed_same_draws(self):
        np.testing.assert_array_equal(RngStream(9).uniform_disk(10, 3.0), RngStream(9).uniform_disk(10, 3.0))

    def test_disk_radius(self):
        pts = RngStream(2).uniform_disk(2000, 9.0)
        assert np.all(np.linalg.norm(pts, axis=1) <= 9.0)
        # area-uniform: about a quarter of points inside half the radius
        inner = np.mean(np.linalg.norm(pts, axis=1) < 4.5)
        assert 0.2 < inner < 0.3


class TestSampleScenario:

    def test_single_agent(self):
        s = sample_scenario(RngStream(0), ScenarioConfig(n_agents=1))
        assert s.is_placed
        assert np.linalg.norm(s.start_array()[0]) <= 9.0
        assert np.linalg.norm(s.goal_array()[0]) <= 9.0

    def test_five_agents_separated(self):
        s = sample_scenario(RngStream(5), ScenarioConfig())
        for pts in (s.start_array(), s.goal_array()):
            assert pts.shape == (5, 2)
            for i in range(5):
                for j in range(i + 1, 5):
                    assert np.linalg.norm(pts[i] - pts[j]) >= 4.0
            assert np.all(np.linalg.norm(pts, axis=1) <= 9.0)

    def test_deterministic(self):
        a = sample_scenario(RngStream(42), ScenarioConfig())
        b = sample_scenario(RngStream(42), ScenarioConfig())
        assert a == b
        assert scenario_hash(a) == scenario_hash(b)

    def test_different_seeds_differ(self):
        assert scenario_hash(sample_scenario(RngStream(1), SMALL)) != scenario_hash(sample_scenario(RngStream(2), SMALL))

    def test_overcrowded(self, monkeypatch):
        monkeypatch.setattr(montecarlo, "MAX_RESAMPLES", 20)
        with pytest.raises(ScenarioError):
            sample_scenario(RngStream(0), ScenarioConfig(n_agents=40))


class TestRunTrial:

    def test_single_agent_converges(self):
        cfg = ScenarioConfig(n_agents=1, horizon=40.0, starts=((1.0, 0.0),), goals=((0.0, 0.0),))
        r = run_trial(cfg, "centralized", seed=3)
        assert r.converged
        assert 0 < r.converge_time <= cfg.horizon
        assert r.h_min == math.inf
        assert r.infeasible_steps == 0
        record = r.to_record()
        assert record["h_min"] is None
        json.dumps(record)
        assert TrialResult.from_record(record) == r

    def test_far_apart_agents_never_touch(self):
        cfg = ScenarioConfig(n_agents=2, horizon=5.0, starts=((-6, 0), (6, 0)), goals=((-6, 3), (6, 3)))
        r = run_trial(cfg, Policy.parse("df"))
        assert r.h_min == pytest.approx(144.0 - 16.0)
        assert r.policy == "df"
        assert r.agent_infeasible_steps == (0, 0)

    def test_not_converged_within_short_horizon(self):
        cfg = ScenarioConfig(n_agents=1, horizon=1.0, starts=((5.0, 0.0),), goals=((-5.0, 0.0),))
        r = run_trial(cfg, "df")
        assert not r.converged
        assert r.converge_time is None
        assert not r.gridlocked

    def test_needs_placed_scenario(self):
        with pytest.raises(ContractError):
            run_trial(ScenarioConfig(), "df")

    def test_solver_failure_is_tagged(self, monkeypatch):
        class Failing:
            def __init__(self, *args, **kwargs):
                self.stats = {}

            def step(self, world):
                raise QpSolverError("cap", {"rows": 1})

        monkeypatch.setattr(montecarlo, "Controller", Failing)
        cfg = ScenarioConfig(n_agents=1, horizon=1.0, starts=((0.0, 0.0),), goals=((1.0, 0.0),))
        with pytest.raises(TrialError) as exc:
            run_trial(cfg, "ccs2", seed=17)
        assert exc.value.seed == 17
        assert exc.value.policy == "ccs2"
        assert isinstance(exc.value.cause, QpSolverError)

    def test_trace_recorder(self):
        from cbf_swarm.trace import TraceRecorder
        cfg = ScenarioConfig(n_agents=2, horizon=1.0, starts=((-6, 0), (6, 0)), goals=((0, 0), (6, 3)))
        rec = TraceRecorder(2, cfg.r0)
        r = run_trial(cfg, "centralized", recorder=rec)
        assert len(rec) == cfg.n_steps
        assert rec.min_h0() >= r.h_min


class TestAggregate:

    def test_excludes_non_convergent_from_max_and_mean(self):
        trials = [
            result("centralized", 0, 10.0),
            result("centralized", 1, 20.0, h_min=-0.3, infeasible_steps=4),
            result("centralized", 2, None, h_min=0.1),
        ]
        report = aggregate(trials, [Policy.parse("centralized")])
        row = report.row("centralized")
        assert row.n_trials == 3
        assert row.min_converge_time == 10.0
        assert row.max_converge_time == 20.0
        assert row.mean_converge_time == pytest.approx(15.0)
        assert row.no_converge == 1
        assert row.worst_h_min == pytest.approx(-0.3)
        assert row.infeasible_trials == 1
        assert row.infeasible_steps == 4

    def test_no_convergent_trials(self):
        report = aggregate([result("df", 0, None)], [Policy.parse("df")])
        row = report.row("df")
        assert row.mean_converge_time is None
        assert "-" in report.render_text()

    def test_rows_follow_policy_order_and_trials_are_sorted(self):
        trials = [result("df", 1, 5.0), result("centralized", 1, 4.0), result("df", 0, 6.0), result("centralized", 0, 3.0)]
        report = aggregate(trials, [Policy.parse("centralized"), Policy.parse("df")])
        assert [r.policy for r in report.rows] == ["centralized", "df"]
        assert [(t.policy, t.trial) for t in report.trials] == [("centralized", 0), ("centralized", 1), ("df", 0), ("df", 1)]

    def test_csv_and_text(self):
        report = aggregate([result("pcca", 0, 12.5)], [Policy.parse("pcca")])
        csv_text = report.to_csv()
        assert csv_text.splitlines()[0].startswith("policy,n_trials,min_converge_time")
        assert csv_text.splitlines()[1].startswith("pcca,1,12.5,12.5,12.5")
        text = report.render_text()
        assert "pcca" in text and "12.50" in text

    def test_margin_for(self):
        assert margin_for(AggregateRow("a", 1, None, None, None, -0.25, 0, 0, 0)) == pytest.approx(0.25)
        assert margin_for(AggregateRow("a", 1, None, None, None, 0.5, 0, 0, 0)) == 0.0
        assert margin_for(AggregateRow("a", 1, None, None, None, None, 0, 0, 0)) == 0.0


class TestComparisonRows:

    def test_sorted_slowest_first(self):
        policies = [Policy.parse("centralized"), Policy.parse("df")]
        trials = [
            result("centralized", 0, 10.0), result("df", 0, 14.0),
            result("centralized", 1, 20.0), result("df", 1, None),
            result("centralized", 2, None), result("df", 2, None),
        ]
        rows = comparison_rows(aggregate(trials, policies))
        assert [r["trial"] for r in rows] == [1, 0, 2]
        assert rows[0]["mean_converge_time"] == pytest.approx(20.0)
        assert rows[1]["mean_converge_time"] == pytest.approx(12.0)
        assert rows[2]["mean_converge_time"] is None
        cols = comparison_columns(aggregate(trials, policies))
        assert set(rows[0]) <= set(cols)

    def test_hmin_sorted_closest_call_first(self):
        policies = [Policy.parse("centralized"), Policy.parse("df")]
        trials = [
            result("centralized", 0, 10.0, h_min=0.4), result("df", 0, 14.0, h_min=-0.6),
            result("centralized", 1, 20.0, h_min=1.0), result("df", 1, None, h_min=2.0),
            result("centralized", 2, None, h_min=-0.1), result("df", 2, None, h_min=0.0),
        ]
        rows = hmin_comparison_rows(aggregate(trials, policies))
        assert [r["trial"] for r in rows] == [0, 2, 1]
        assert rows[0]["mean_h_min"] == pytest.approx(-0.1)
        assert rows[2]["mean_h_min"] == pytest.approx(1.5)
        assert set(rows[0]) <= set(comparison_columns(aggregate(trials, policies)))

    def test_infinite_h_min_is_left_out_of_the_mean(self):
        policies = [Policy.parse("centralized"), Policy.parse("df")]
        trials = [result("centralized", 0, 1.0, h_min=float("inf")), result("df", 0, 1.0, h_min=0.3)]
        (row,) = hmin_comparison_rows(aggregate(trials, policies))
        assert row["mean_h_min"] == pytest.approx(0.3)
        assert row["centralized_h_min"] is None


class TestRunBatch:

    def test_same_scenarios_across_policies(self):
        report = run_batch(2, ["centralized", "df"], SMALL, base_seed=4)
        for k in range(2):
            hashes = {t.scenario_hash for t in report.trials if t.trial == k}
            assert len(hashes) == 1
        assert {t.seed for t in report.trials} == {4, 5}
        assert [r.n_trials for r in report.rows] == [2, 2]

    def test_deterministic(self):
        a = run_batch(2, ["ccs2", "pcca"], SMALL, base_seed=7)
        b = run_batch(2, ["ccs2", "pcca"], SMALL, base_seed=7)
        assert [t.to_record() for t in a.trials] == [t.to_record() for t in b.trials]
        assert a.to_csv() == b.to_csv()

    def test_process_pool_matches_in_process(self):
        serial = run_batch(2, ["centralized"], SMALL, base_seed=1, workers=1)
        parallel = run_batch(2, ["centralized"], SMALL, base_seed=1, workers=2)
        assert [t.to_record() for t in serial.trials] == [t.to_record() for t in parallel.trials]

    def test_progress_callback(self):
        seen = []
        run_batch(1, ["df", "dr"], SMALL, on_result=seen.append)
        assert sorted(t.policy for t in seen) == ["df", "dr"]

    def test_rejects_zero_trials(self):
        with pytest.raises(ValueError):
            run_batch(0, ["df"], SMALL)

    def test_margin_rerun_reuses_scenarios(self):
        report = run_batch(2, ["df"], SMALL, base_seed=3)
        rerun = margin_rerun(report)
        assert [t.scenario_hash for t in rerun.trials] == [t.scenario_hash for t in report.trials]
        expected = margin_for(report.row("df"))
        assert all(t.radius_margin == pytest.approx(expected) for t in rerun.trials)

    def test_margin_rerun_needs_batch_report(self):
        with pytest.raises(ValueError):
            margin_rerun(AggregateReport(rows=(), trials=()))


@pytest.mark.slow
class TestAcceptanceBatch:
    """Full 100-trial comparison at the default parameters."""

    @pytest.fixture(scope="class")
    def report(self):
        return run_batch(100, DEFAULT_POLICIES, ScenarioConfig(), base_seed=0, workers=4)

    def test_always_feasible_policies(self, report):
        for name in ("centralized", "ccs2", "pcca", "pcca-filter"):
            assert report.row(name).infeasible_trials == 0

    def test_decentralized_infeasibility_prevalence(self, report):
        for name in ("df", "dr"):
            assert report.row(name).infeasible_trials >= 10

    def test_safety_ordering(self, report):
        assert report.row("centralized").worst_h_min >= -0.05
        assert report.row("pcca").worst_h_min >= -0.2
        assert report.row("pcca-filter").worst_h_min >= -0.2
        assert report.row("df").worst_h_min <= -0.5
        assert report.row("dr").worst_h_min <= -0.5

    def test_liveness_ordering(self, report):
        central = report.row("centralized").mean_converge_time
        assert report.row("pcca").mean_converge_time == pytest.approx(central, rel=0.10)
        assert report.row("df").mean_converge_time >= 1.15 * central
        for name in ("centralized", "pcca", "pcca-filter"):
            assert report.row(name).no_converge == 0

    def test_margin_rerun(self, report):
        rerun = margin_rerun(report, workers=4)
        assert rerun.row("centralized").worst_h_min >= -0.01
        assert rerun.row("pcca-filter").worst_h_min >= -0.01
        for name in ("df", "dr"):
            assert rerun.row(name).infeasible_trials >= report.row(name).infeasible_trials
