"""
Run configuration for cbf-sim.

A run config is a flat `key = value` TOML file. Every key is optional and
defaults to the Monte-Carlo setup. Command-line flags override file values,
and the merged result is written back as `effective_config.toml` so a run
can be reproduced with `--config <out>/effective_config.toml`.

Keys:
    n_agents, r0, R0, radius_margin, dt, horizon, l0, l1, lqr_q,
    convergence_pos_tol, convergence_vel_tol, filter_tau      scenario
    policies      list of policy names, e.g. ["centralized", "pcca-filter:0.5"]
    n_trials      trials per policy
    base_seed     trial k uses seed base_seed + k
    workers       process count (1 = in-process)
    trace         write per-step trace CSVs
    margin_rerun  rerun the batch with per-policy radius margins
    out_dir       output directory
    db            results database path ("" = <out_dir>/results.db)
"""

from __future__ import annotations

import dataclasses
import json
import math
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Tuple, Union

from cbf_swarm import ScenarioConfig
from cbf_swarm.errors import ConfigError
from cbf_swarm.policies import DEFAULT_POLICIES, Policy

DEFAULT_OUT_DIR = "results"
DEFAULT_N_TRIALS = 100
EFFECTIVE_CONFIG = "effective_config.toml"

SCENARIO_KEYS = (
    "n_agents", "r0", "R0", "radius_margin", "dt", "horizon", "l0", "l1", "lqr_q",
    "convergence_pos_tol", "convergence_vel_tol", "filter_tau",
)


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    policies: Tuple[str, ...] = tuple(p.label for p in DEFAULT_POLICIES)
    n_trials: int = DEFAULT_N_TRIALS
    base_seed: int = 0
    workers: int = 1
    trace: bool = False
    margin_rerun: bool = False
    out_dir: str = DEFAULT_OUT_DIR
    db: str = ""

    def __post_init__(self):
        if not self.policies:
            raise ConfigError("policies", "at least one policy is required")
        labels = []
        for text in self.policies:
            labels.append(Policy.parse(text).label)
        object.__setattr__(self, "policies", tuple(labels))
        if self.n_trials < 1:
            raise ConfigError("n_trials", f"must be >= 1, got {self.n_trials}")
        if self.base_seed < 0:
            raise ConfigError("base_seed", f"must be >= 0, got {self.base_seed}")
        if self.workers < 1:
            raise ConfigError("workers", f"must be >= 1, got {self.workers}")
        if not self.out_dir:
            raise ConfigError("out_dir", "must not be empty")

    @property
    def policy_objects(self) -> Tuple[Policy, ...]:
        return tuple(Policy.parse(p) for p in self.policies)

    @property
    def db_path(self) -> Path:
        return Path(self.db) if self.db else Path(self.out_dir) / "results.db"

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Build from a flat mapping, rejecting unknown keys and wrong types."""
        scenario_kwargs = {}
        run_kwargs = {}
        for key, value in data.items():
            if key in SCENARIO_KEYS:
                scenario_kwargs[key] = _coerce(key, value, _scenario_type(key))
            elif key in _RUN_TYPES:
                run_kwargs[key] = _coerce(key, value, _RUN_TYPES[key])
            else:
                raise ConfigError(key, "unknown key")
        return cls(scenario=ScenarioConfig(**scenario_kwargs), **run_kwargs)

    def to_mapping(self) -> dict:
        out = {key: getattr(self.scenario, key) for key in SCENARIO_KEYS}
        for key in _RUN_TYPES:
            out[key] = getattr(self, key)
        out["policies"] = list(self.policies)
        return out

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with the non-None overrides applied (scenario keys included)."""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if not overrides:
            return self
        data = self.to_mapping()
        data.update(overrides)
        return RunConfig.from_mapping(data)

    def to_toml(self) -> str:
        lines = []
        for key, value in self.to_mapping().items():
            lines.append(f"{key} = {_toml_value(value)}")
        return "\n".join(lines) + "\n"


_RUN_TYPES = {
    "policies": tuple,
    "n_trials": int,
    "base_seed": int,
    "workers": int,
    "trace": bool,
    "margin_rerun": bool,
    "out_dir": str,
    "db": str,
}


def _scenario_type(key: str) -> type:
    return int if key == "n_agents" else float


def _coerce(key: str, value: Any, kind: type) -> Any:
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if kind is tuple:
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigError(key, f"expected a list of names, got {value!r}")
        return tuple(value)
    raise AssertionError(kind)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ConfigError("config", f"cannot write non-finite value {value}")
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, str):
        # JSON string escapes are valid TOML basic strings
        return json.dumps(value)
    return str(value)


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Read a run config file; no path gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("config", f"{path}: {e}") from None
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(key, "tables are not supported; use flat key = value lines")
    return RunConfig.from_mapping(data)


def write_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_toml())
    return path
