#!/usr/bin/env python3
"""
Example: the two failure presets and a small policy comparison.

Run with: python examples/run_demo.py
"""

from cbf_swarm import ScenarioConfig, build_preset, run_batch, run_trial
from cbf_swarm.presets import MIDDLE_AGENT


def main():
    print("=== Crossing paths ===\n")
    cfg = build_preset("df_crossing", ScenarioConfig(horizon=30.0))
    for policy in ("df", "centralized", "pcca"):
        r = run_trial(cfg, policy)
        print(f"  {policy:12s} h_min={r.h_min:8.3f}  converged={r.converged}  t={r.converge_time}")

    print("\n=== Passing a parked agent ===\n")
    cfg = build_preset("dr_three_agent", ScenarioConfig(horizon=40.0))
    for policy in ("dr", "dr-brake", "pcca"):
        r = run_trial(cfg, policy)
        print(
            f"  {policy:12s} h_min={r.h_min:8.3f}  "
            f"middle agent infeasible steps={r.agent_infeasible_steps[MIDDLE_AGENT]}"
        )

    print("\n=== 10 sampled 5-agent scenarios ===\n")
    report = run_batch(10, cfg=ScenarioConfig(), base_seed=0, workers=4)
    print(report.render_text())


if __name__ == '__main__':
    main()
