"""Per-step trajectory recording for plotting."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .barrier import pair_h0, pair_indices
from .world import WorldState


class TraceRecorder:
    """
    Collects one row per control step: time, each agent's position,
    velocity and applied control, and the physical barrier h0 of every pair.
    """

    def __init__(self, n_agents: int, r0: float):
        self.n_agents = n_agents
        self.r0 = r0
        self.pairs = pair_indices(n_agents)
        self.rows: List[List[float]] = []

    def header(self) -> List[str]:
        cols = ["t"]
        for i in range(self.n_agents):
            cols += [f"x{i}", f"y{i}", f"vx{i}", f"vy{i}", f"ux{i}", f"uy{i}"]
        cols += [f"h0_{i}_{j}" for i, j in self.pairs]
        return cols

    def record(self, world: WorldState, controls: NDArray[np.float64]) -> None:
        controls = np.asarray(controls, dtype=float).reshape(-1, 2)
        row = [world.time]
        for p, v, u in zip(world.positions, world.velocities, controls):
            row += [p[0], p[1], v[0], v[1], u[0], u[1]]
        row += pair_h0(world.positions, self.r0).tolist()
        self.rows.append([float(x) for x in row])

    def min_h0(self) -> float:
        """Smallest recorded pair barrier; +inf without pairs or rows."""
        if not self.pairs or not self.rows:
            return math.inf
        start = 1 + 6 * self.n_agents
        return min(min(r[start:]) for r in self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.header())
            for row in self.rows:
                writer.writerow([repr(x) for x in row])
        return path

    @staticmethod
    def filename(trial: Union[int, str], policy: str) -> str:
        return f"trace_{trial}_{policy.replace(':', '-')}.csv"


def read_trace(path: Union[str, Path]) -> tuple[List[str], Sequence[Sequence[float]]]:
    """Load a trace CSV back as (header, rows)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(x) for x in r] for r in reader]
    return header, rows
