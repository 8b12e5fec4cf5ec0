"""
LQR goal-seeking controller giving each agent its preferred acceleration u0.

The axes of a planar double integrator decouple, so the continuous-time
Riccati equation for one axis (A = [[0, 1], [0, 0]], B = [0, 1]^T,
Q = q I2, R = 1) has the closed form

    P = [[p2 p3, p2], [p2, p3]],  p2 = sqrt(q),  p3 = sqrt(q + 2 sqrt(q))

and the gain K = B^T P = [k_pos, k_vel] = [p2, p3].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .errors import ConfigError, ContractError
from .world import AgentState, Vec2

AXIS_A = np.array([[0.0, 1.0], [0.0, 0.0]])
AXIS_B = np.array([[0.0], [1.0]])


@dataclass(frozen=True)
class LqrGain:
    """Per-axis feedback gains u = -k_pos (pos - goal) - k_vel vel."""
    k_pos: float
    k_vel: float
    q: float

    def __post_init__(self):
        if not (self.k_pos > 0 and self.k_vel > 0):
            raise ContractError(f"LQR gains must be positive, got k_pos={self.k_pos}, k_vel={self.k_vel}")

    @property
    def matrix(self) -> NDArray[np.float64]:
        """1x2 per-axis gain row [k_pos, k_vel]."""
        return np.array([[self.k_pos, self.k_vel]])

    def closed_loop_eigenvalues(self) -> NDArray[np.complex128]:
        return np.linalg.eigvals(AXIS_A - AXIS_B @ self.matrix)


def lqr_gain(q: float) -> LqrGain:
    """
    Closed-form continuous-time LQR gains for state cost q and unit control cost.

    Args:
        q: Weight on both position error and velocity (Q = q I).

    Returns:
        LqrGain with k_pos = sqrt(q), k_vel = sqrt(q + 2 sqrt(q)).

    Raises:
        ConfigError: q is not a positive finite number.
    """
    if not (math.isfinite(q) and q > 0):
        raise ConfigError("lqr_q", f"must be > 0, got {q}")
    root_q = math.sqrt(q)
    return LqrGain(k_pos=root_q, k_vel=math.sqrt(q + 2.0 * root_q), q=q)


def riccati_solution(gain: LqrGain) -> NDArray[np.float64]:
    """Per-axis Riccati matrix P recovered from the closed-form gains."""
    p2, p3 = gain.k_pos, gain.k_vel
    return np.array([[p2 * p3, p2], [p2, p3]])


def care_residual(gain: LqrGain) -> float:
    """Max-abs entry of A^T P + P A - P B B^T P + Q for the recovered P."""
    P = riccati_solution(gain)
    Q = gain.q * np.eye(2)
    residual = AXIS_A.T @ P + P @ AXIS_A - P @ AXIS_B @ AXIS_B.T @ P + Q
    return float(np.abs(residual).max())


def numeric_lqr_gain(q: float) -> LqrGain:
    """Same gains from scipy's CARE solver; used to cross-check the closed form."""
    if not (math.isfinite(q) and q > 0):
        raise ConfigError("lqr_q", f"must be > 0, got {q}")
    P = scipy.linalg.solve_continuous_are(AXIS_A, AXIS_B, q * np.eye(2), np.eye(1))
    K = np.linalg.solve(np.eye(1), AXIS_B.T @ P)
    return LqrGain(k_pos=float(K[0, 0]), k_vel=float(K[0, 1]), q=q)


def baseline_control(state: AgentState, goal: Vec2, gain: LqrGain) -> Vec2:
    goal = np.asarray(goal, dtype=float)
    return -gain.k_pos * (state.pos - goal) - gain.k_vel * state.vel


def baseline_controls(
    positions: NDArray[np.float64],
    velocities: NDArray[np.float64],
    goals: NDArray[np.float64],
    gain: LqrGain,
) -> NDArray[np.float64]:
    """Preferred controls for every agent at once, shape (N, 2)."""
    return -gain.k_pos * (positions - goals) - gain.k_vel * velocities
