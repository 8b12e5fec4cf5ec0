"""
Second-order barrier constraints between agents and against the outer wall.

Pairwise barrier h = xi^T xi - r^2 has relative degree two, so the
constraint enforced on the controls is

    F_ij = h'' + l1 h' + l0 h = a_ij + b_ij (u_i - u_j) >= 0
    a_ij = 2 v^T v + 2 l1 xi^T v + l0 (xi^T xi - r^2),   b_ij = 2 xi^T

The wall keeps each agent's center inside radius R_eff = R0 - r0 with
h_w = R_eff^2 - p^T p, built the same way and always treated as soft.

Row ordering: every vectorized helper emits pairs (i, j) with i < j in
lexicographic order. The policy QPs rely on that ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import List, Tuple

import numpy as np
from numpy.typing import NDArray

from .errors import ContractError
from .world import Vec2


@dataclass(frozen=True)
class PairConstraint:
    """a + b (u_i - u_j) >= 0 for agents i and j."""
    a: float
    b: Vec2
    i: int
    j: int


@dataclass(frozen=True)
class WallConstraint:
    """a + b u_i >= 0 keeping agent i inside the outer circle. Always soft."""
    a: float
    b: Vec2
    i: int
    soft: bool = True


@dataclass(frozen=True)
class BarrierDiagnostics:
    h: float        # with constraint radius r
    h0: float       # physical, radius 2 r0
    hdot: float
    in_cstar: bool


def barrier_roots(l0: float, l1: float) -> Tuple[float, float]:
    """
    Roots lambda1 <= lambda2 of s^2 - l1 s + l0 (eigenvalues -lambda of the h dynamics).

    l0=6, l1=5 gives (2, 3).
    """
    disc = l1 * l1 - 4.0 * l0
    if disc < 0:
        raise ContractError(f"complex roots for l0={l0}, l1={l1}; need l1^2 >= 4 l0")
    root = math.sqrt(disc)
    return 0.5 * (l1 - root), 0.5 * (l1 + root)


def pair_constraint(xi: Vec2, v: Vec2, r: float, l0: float, l1: float, i: int, j: int) -> PairConstraint:
    xi = np.asarray(xi, dtype=float)
    v = np.asarray(v, dtype=float)
    a = 2.0 * (v @ v) + 2.0 * l1 * (xi @ v) + l0 * (xi @ xi - r * r)
    return PairConstraint(float(a), 2.0 * xi, i, j)


def wall_constraint(pos: Vec2, vel: Vec2, R_eff: float, l0: float, l1: float, i: int) -> WallConstraint:
    if R_eff <= 0:
        raise ContractError(f"effective wall radius must be > 0, got {R_eff}")
    pos = np.asarray(pos, dtype=float)
    vel = np.asarray(vel, dtype=float)
    a = -2.0 * (vel @ vel) - 2.0 * l1 * (pos @ vel) + l0 * (R_eff * R_eff - pos @ pos)
    return WallConstraint(float(a), -2.0 * pos, i)


def diagnostics(xi: Vec2, v: Vec2, r: float, r0: float, lambda1: float) -> BarrierDiagnostics:
    if lambda1 <= 0:
        raise ContractError(f"lambda1 must be > 0, got {lambda1}")
    xi = np.asarray(xi, dtype=float)
    v = np.asarray(v, dtype=float)
    d2 = float(xi @ xi)
    h = d2 - r * r
    h0 = d2 - (2.0 * r0) ** 2
    hdot = 2.0 * float(xi @ v)
    in_cstar = h >= 0 and h >= -hdot / lambda1
    return BarrierDiagnostics(h, h0, hdot, bool(in_cstar))


def pair_indices(n_agents: int) -> List[Tuple[int, int]]:
    return list(combinations(range(n_agents), 2))


def pair_rows(
    positions: NDArray[np.float64],
    velocities: NDArray[np.float64],
    r_sq: float,
    l0: float,
    l1: float,
) -> Tuple[List[Tuple[int, int]], NDArray[np.float64], NDArray[np.float64]]:
    """
    Constraint data for every unordered pair, vectorized.

    Returns (pairs, a, b) with a of shape (P,) and b of shape (P, 2); row k
    belongs to pairs[k] = (i, j), i < j.
    """
    n = positions.shape[0]
    pairs = pair_indices(n)
    if not pairs:
        return pairs, np.zeros(0), np.zeros((0, 2))
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])
    xi = positions[ii] - positions[jj]
    v = velocities[ii] - velocities[jj]
    a = (2.0 * np.einsum("kd,kd->k", v, v)
         + 2.0 * l1 * np.einsum("kd,kd->k", xi, v)
         + l0 * (np.einsum("kd,kd->k", xi, xi) - r_sq))
    return pairs, a, 2.0 * xi


def wall_rows(
    positions: NDArray[np.float64],
    velocities: NDArray[np.float64],
    R_eff: float,
    l0: float,
    l1: float,
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Wall constraint data for every agent: (a of shape (N,), b of shape (N, 2))."""
    a = (-2.0 * np.einsum("kd,kd->k", velocities, velocities)
         - 2.0 * l1 * np.einsum("kd,kd->k", positions, velocities)
         + l0 * (R_eff * R_eff - np.einsum("kd,kd->k", positions, positions)))
    return a, -2.0 * positions


def pair_h0(positions: NDArray[np.float64], r0: float) -> NDArray[np.float64]:
    """Physical barrier ||xi||^2 - (2 r0)^2 for every unordered pair."""
    pairs = pair_indices(positions.shape[0])
    if not pairs:
        return np.zeros(0)
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])
    xi = positions[ii] - positions[jj]
    return np.einsum("kd,kd->k", xi, xi) - (2.0 * r0) ** 2


def min_pair_h0(positions: NDArray[np.float64], r0: float) -> float:
    """Smallest physical barrier value over all pairs; +inf with a single agent."""
    h0 = pair_h0(positions, r0)
    return float(h0.min()) if h0.size else math.inf


def all_in_cstar(
    positions: NDArray[np.float64],
    velocities: NDArray[np.float64],
    r_sq: float,
    lambda1: float,
) -> Tuple[bool, Tuple[int, int] | None]:
    """Whether every pair lies in C*; on failure also returns the first offending pair."""
    for i, j in pair_indices(positions.shape[0]):
        xi = positions[i] - positions[j]
        v = velocities[i] - velocities[j]
        h = float(xi @ xi) - r_sq
        hdot = 2.0 * float(xi @ v)
        if not (h >= 0 and h >= -hdot / lambda1):
            return False, (i, j)
    return True, None
