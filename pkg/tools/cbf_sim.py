#!/usr/bin/env python3
"""
cbf-sim: barrier-function collision-avoidance experiments.

Subcommands:
    preset   run a named scenario (df_crossing, dr_three_agent, five_agent_demo)
    mc       Monte-Carlo batch over sampled scenarios, every policy on the same ones
    trial    one sampled scenario under one or more policies, with traces
    report   re-aggregate trials stored in a results database

Outputs (in --out, default results/):
    trials.jsonl            one JSON record per (trial, policy)
    aggregate.csv / .txt    per-policy summary table
    comparison.csv          per-trial side-by-side, slowest first
    hmin_comparison.csv     the same rows, lowest mean h_min first
    margin_*.{jsonl,csv,txt} the same after --margin-rerun
    trace_<trial>_<policy>.csv
    summary.json            presets only
    effective_config.toml   merged config; --config it to reproduce the run
    results.db              SQLite copy of every trial record
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

# Allow `python tools/cbf_sim.py` from a checkout as well as the installed script
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from cbf_swarm import (  # noqa: E402
    AggregateReport,
    Policy,
    RngStream,
    TraceRecorder,
    TrialResult,
    build_preset,
    comparison_rows,
    hmin_comparison_rows,
    margin_rerun,
    run_batch,
    run_trial,
    sample_scenario,
)
from cbf_swarm.errors import CbfSwarmError, ConfigError  # noqa: E402
from cbf_swarm.montecarlo import aggregate, comparison_columns  # noqa: E402
from cbf_swarm.presets import PRESETS, get_preset  # noqa: E402

from tools.config import EFFECTIVE_CONFIG, RunConfig, load_config, write_config  # noqa: E402
from tools.store import ResultStore  # noqa: E402

logger = logging.getLogger("cbf_sim")


class ResultWriter:
    """Every output file of a run is written through here."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.written: List[Path] = []

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def _done(self, path: Path) -> Path:
        self.written.append(path)
        logger.debug("wrote %s", path)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.write_text(text)
        return self._done(path)

    def write_json(self, name: str, obj: Any) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_jsonl(self, name: str, results: Iterable[TrialResult]) -> Path:
        lines = [json.dumps(r.to_record(), sort_keys=True) for r in results]
        return self.write_text(name, "".join(line + "\n" for line in lines))

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row.get(c) for c in columns])
        return self.write_text(name, buf.getvalue())

    def write_trace(self, recorder: TraceRecorder, trial: Any, policy: str) -> Path:
        return self._done(recorder.write_csv(self.path(TraceRecorder.filename(trial, policy))))

    def write_report(self, report: AggregateReport, prefix: str = "") -> None:
        self.write_jsonl(f"{prefix}trials.jsonl", report.trials)
        self.write_text(f"{prefix}aggregate.csv", report.to_csv())
        self.write_text(f"{prefix}aggregate.txt", report.render_text())
        self.write_csv(f"{prefix}comparison.csv", comparison_columns(report), comparison_rows(report))
        self.write_csv(f"{prefix}hmin_comparison.csv", comparison_columns(report), hmin_comparison_rows(report))

    def write_config(self, config: RunConfig) -> Path:
        return self._done(write_config(config, self.path(EFFECTIVE_CONFIG)))


def describe(result: TrialResult) -> str:
    t = "-" if result.converge_time is None else f"{result.converge_time:.2f}s"
    h = "-" if result.to_record()["h_min"] is None else f"{result.h_min:.4f}"
    return f"converged={result.converged} t={t} h_min={h} infeasible_steps={result.infeasible_steps}"


def progress(total: int):
    """Callback printing `Trial k/n` lines as results arrive."""
    state = {"done": 0, "start": time.time()}

    def on_result(result: TrialResult):
        state["done"] += 1
        elapsed = time.time() - state["start"]
        print(f"Trial {state['done']}/{total} seed {result.seed} {result.policy}: {describe(result)} ({elapsed:.0f}s)")

    return on_result


def run_config(args: argparse.Namespace) -> RunConfig:
    """File config (or defaults) with command-line flags applied on top."""
    config = load_config(args.config)
    return config.with_overrides(
        dt=args.dt,
        horizon=args.horizon,
        policies=args.policy,
        n_trials=getattr(args, "trials", None),
        base_seed=args.seed,
        workers=args.workers,
        out_dir=str(args.out) if args.out is not None else None,
        db=str(args.db) if args.db is not None else None,
        trace=True if args.trace else None,
        margin_rerun=True if getattr(args, "margin_rerun", False) else None,
    )


def store_results(store: ResultStore, run_id: int, results: Iterable[TrialResult], phase: str = "base"):
    for r in results:
        store.store_trial(run_id, r, phase)


def cmd_preset(args: argparse.Namespace) -> int:
    config = run_config(args)
    preset = get_preset(args.name)
    scenario = build_preset(args.name, config.scenario)
    policies = [Policy.parse(p) for p in args.policy] if args.policy else [preset.default_policy]

    writer = ResultWriter(Path(config.out_dir))
    writer.write_config(config)
    print(f"Preset {preset.name}: {preset.description} ({scenario.n_agents} agents)")

    results = []
    for policy in policies:
        recorder = TraceRecorder(scenario.n_agents, scenario.r0)
        result = run_trial(scenario, policy, recorder=recorder)
        writer.write_trace(recorder, preset.name, policy.label)
        results.append(result)
        print(f"  {policy.label}: {describe(result)}")
        print(f"    infeasible steps per agent: {list(result.agent_infeasible_steps)}")

    writer.write_json("summary.json", {
        "preset": preset.name,
        "starts": [list(p) for p in scenario.starts],
        "goals": [list(p) for p in scenario.goals],
        "results": [r.to_record() for r in results],
    })
    with ResultStore(config.db_path) as store:
        run_id = store.start_run("preset", config.to_toml(), [p.label for p in policies])
        store_results(store, run_id, results)

    print(f"\nResults written to {writer.out_dir}")
    return 0


def cmd_mc(args: argparse.Namespace) -> int:
    config = run_config(args)
    policies = config.policy_objects
    writer = ResultWriter(Path(config.out_dir))
    writer.write_config(config)

    total = config.n_trials * len(policies)
    print(f"Running {config.n_trials} trials x {len(policies)} policies (seed {config.base_seed}, {config.workers} workers)")
    start = time.time()
    report = run_batch(
        config.n_trials,
        policies,
        config.scenario,
        config.base_seed,
        workers=config.workers,
        on_result=progress(total),
    )
    writer.write_report(report)
    print(f"\n{report.render_text()}")

    with ResultStore(config.db_path) as store:
        run_id = store.start_run("mc", config.to_toml(), list(config.policies))
        store_results(store, run_id, report.trials)

        if config.margin_rerun:
            print("Margin rerun on the same scenarios:")
            rerun = margin_rerun(report, workers=config.workers, on_result=progress(total))
            writer.write_report(rerun, prefix="margin_")
            store_results(store, run_id, rerun.trials, phase="margin")
            print(f"\n{rerun.render_text()}")

    if config.trace:
        # Trial 0 of each policy, rerun in-process with a recorder
        scenario = sample_scenario(RngStream(config.base_seed), config.scenario)
        for policy in policies:
            recorder = TraceRecorder(scenario.n_agents, scenario.r0)
            run_trial(scenario, policy, config.base_seed, recorder=recorder)
            writer.write_trace(recorder, 0, policy.label)

    elapsed = time.time() - start
    print(f"Total: {total} trials in {elapsed:.1f}s, results written to {writer.out_dir}")
    return 0


def cmd_trial(args: argparse.Namespace) -> int:
    config = run_config(args)
    writer = ResultWriter(Path(config.out_dir))
    writer.write_config(config)

    seed = config.base_seed
    scenario = sample_scenario(RngStream(seed), config.scenario)
    print(f"Trial seed {seed}: {scenario.n_agents} agents")
    results = []
    for policy in config.policy_objects:
        recorder = TraceRecorder(scenario.n_agents, scenario.r0)
        result = run_trial(scenario, policy, seed, recorder=recorder)
        writer.write_trace(recorder, seed, policy.label)
        results.append(result)
        print(f"  {policy.label}: {describe(result)}")

    report = aggregate(results, config.policy_objects, config.scenario, seed, 1)
    writer.write_report(report)
    with ResultStore(config.db_path) as store:
        run_id = store.start_run("trial", config.to_toml(), list(config.policies))
        store_results(store, run_id, results)

    print(f"\nResults written to {writer.out_dir}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    db_path = Path(args.db) if args.db is not None else Path(args.out or "results") / "results.db"
    if not db_path.exists():
        print(f"Error: Database not found: {db_path}")
        return 1

    with ResultStore(db_path) as store:
        run_id = args.run if args.run is not None else store.latest_run_id()
        if run_id is None:
            print(f"Error: no runs stored in {db_path}")
            return 1
        try:
            policies = [Policy.parse(p) for p in store.run_policies(run_id)]
            config_text = store.run_config(run_id)
        except KeyError:
            print(f"Error: run {run_id} not found in {db_path}")
            return 1
        phases = store.phases(run_id)
        reports = {phase: aggregate(store.trials(run_id, phase), policies) for phase in phases}
        total = store.count()

    print(f"{db_path}: {total} trial records")
    print(f"Run {run_id} config:")
    for line in config_text.splitlines():
        print(f"  {line}")
    print()

    writer = ResultWriter(Path(args.out)) if args.out is not None else None
    if writer:
        writer.write_text(EFFECTIVE_CONFIG, config_text)
    for phase, report in reports.items():
        print(f"Run {run_id} ({phase}, {len(report.trials)} trial records):\n")
        print(report.render_text())
        if writer:
            prefix = "" if phase == "base" else f"{phase}_"
            writer.write_text(f"{prefix}aggregate.csv", report.to_csv())
            writer.write_text(f"{prefix}aggregate.txt", report.render_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Run config file (flat key = value TOML)")
    common.add_argument(
        "--policy",
        action="append",
        default=None,
        help="Policy to run (repeatable): centralized, df, dr, dr-brake, ccs2, pcca, pcca-filter[:tau]",
    )
    common.add_argument("--seed", type=int, default=None, help="Base seed (trial k uses seed + k)")
    common.add_argument("--dt", type=float, default=None, help="Sample time in seconds")
    common.add_argument("--horizon", type=float, default=None, help="Simulated seconds per trial")
    common.add_argument("--workers", type=int, default=None, help="Worker processes")
    common.add_argument("--trace", action="store_true", help="Write per-step trace CSVs")
    common.add_argument("--out", type=Path, default=None, help="Output directory")
    common.add_argument("--db", type=Path, default=None, help="Results database path")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="cbf-sim",
        description="Barrier-function collision-avoidance experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  cbf-sim preset df_crossing --policy df          Follower collision on crossing paths
  cbf-sim preset dr_three_agent --policy dr       Middle agent goes infeasible
  cbf-sim mc --config configs/default.toml        Six-policy 100-trial comparison
  cbf-sim mc --trials 5 --seed 7 --margin-rerun   Small batch plus margin rerun
  cbf-sim trial --seed 3 --policy pcca            One sampled scenario with traces
  cbf-sim report --db results/results.db          Re-aggregate the latest stored run
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preset", parents=[common], help="Run a named scenario")
    p.add_argument("name", choices=list(PRESETS), help="Preset name")
    p.set_defaults(func=cmd_preset)

    p = sub.add_parser("mc", parents=[common], help="Monte-Carlo batch")
    p.add_argument("--trials", type=int, default=None, help="Trials per policy")
    p.add_argument("--margin-rerun", action="store_true", help="Rerun with per-policy radius margins")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("trial", parents=[common], help="One sampled scenario, with traces")
    p.set_defaults(func=cmd_trial)

    p = sub.add_parser("report", parents=[common], help="Re-aggregate stored trials")
    p.add_argument("--run", type=int, default=None, help="Run id (default: latest)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"Error: invalid config: {e}")
        return 1
    except CbfSwarmError as e:
        print(f"Error: {e}")
        return 1
    except OSError as e:
        print(f"Error: {e}")
        return 1


if __name__ == "__main__":
    exit(main())
