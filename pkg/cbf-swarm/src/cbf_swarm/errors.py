"""
Exception hierarchy for cbf_swarm.

Library code raises these; the CLI turns them into "Error: ..." lines and
a nonzero exit code.
"""

from __future__ import annotations

from typing import Any, Dict, Optional, Tuple


class CbfSwarmError(Exception):
    """Base class for all cbf_swarm errors."""


class ContractError(CbfSwarmError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(CbfSwarmError, ValueError):
    """An invalid configuration value. Carries the offending field name."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
        self.message = message

    def __reduce__(self):
        return (type(self), (self.field, self.message))


class QpInputError(CbfSwarmError, ValueError):
    """QP data contains non-finite entries or has inconsistent shapes."""


class QpSolverError(CbfSwarmError, RuntimeError):
    """The active-set iteration did not terminate within its cap."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)

    def __reduce__(self):
        return (type(self), (str(self), self.diagnostics))


class NotAdmissibleError(CbfSwarmError):
    """A pair of agents lies outside the admissible set C*."""

    def __init__(self, pair: Tuple[int, int], h: float, hdot: float):
        self.pair = pair
        self.h = h
        self.hdot = hdot
        super().__init__(f"pair {pair} outside admissible set (h={h:.6g}, hdot={hdot:.6g})")

    def __reduce__(self):
        return (type(self), (self.pair, self.h, self.hdot))


class ScenarioError(CbfSwarmError):
    """Scenario sampling gave up (configuration too crowded)."""


class TrialError(CbfSwarmError):
    """A trial aborted. Wraps the cause with the trial identification."""

    def __init__(self, seed: int, policy: str, cause: BaseException):
        self.seed = seed
        self.policy = policy
        self.cause = cause
        super().__init__(f"trial seed={seed} policy={policy}: {cause}")

    def __reduce__(self):
        return (type(self), (self.seed, self.policy, self.cause))
