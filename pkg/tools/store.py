"""
SQLite results store.

Every trial record from a cbf-sim run is inserted here alongside the flat
files, so `cbf-sim report` can re-aggregate stored trials without
rerunning them. The schema is created on open and is safe to apply to an
existing database (idempotent; missing columns are added).
"""

from __future__ import annotations

import json
import sqlite3
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from cbf_swarm import TrialResult


class ResultStore:
    """SQLite database of runs and their trial records"""

    def __init__(self, db_path: Path):
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.conn = sqlite3.connect(str(self.db_path), check_same_thread=False)
        self.lock = threading.Lock()
        self.conn.execute("PRAGMA journal_mode=WAL")
        self.conn.execute("PRAGMA synchronous=NORMAL")
        self.conn.execute("PRAGMA foreign_keys=ON")
        migrate(self.conn)

    def start_run(self, kind: str, config_toml: str, policies: List[str]) -> int:
        with self.lock:
            cursor = self.conn.execute(
                "INSERT INTO runs (created, kind, config, policies) VALUES (?, ?, ?, ?)",
                (datetime.now(timezone.utc).isoformat(), kind, config_toml, json.dumps(policies)),
            )
            self.conn.commit()
            return cursor.lastrowid

    def store_trial(self, run_id: int, result: TrialResult, phase: str = "base") -> int:
        with self.lock:
            cursor = self.conn.execute(
                """
                INSERT INTO trials (
                    run_id, phase, trial, seed, policy, converged, converge_time,
                    h_min, infeasible_steps, radius_margin, scenario_hash, record
                ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """,
                (
                    run_id,
                    phase,
                    result.trial,
                    result.seed,
                    result.policy,
                    int(result.converged),
                    result.converge_time,
                    result.to_record()["h_min"],
                    result.infeasible_steps,
                    result.radius_margin,
                    result.scenario_hash,
                    json.dumps(result.to_record()),
                ),
            )
            self.conn.commit()
            return cursor.lastrowid

    def latest_run_id(self) -> Optional[int]:
        with self.lock:
            row = self.conn.execute("SELECT MAX(id) FROM runs").fetchone()
        return row[0]

    def run_policies(self, run_id: int) -> List[str]:
        with self.lock:
            row = self.conn.execute("SELECT policies FROM runs WHERE id = ?", (run_id,)).fetchone()
        if row is None:
            raise KeyError(run_id)
        return json.loads(row[0])

    def run_config(self, run_id: int) -> str:
        with self.lock:
            row = self.conn.execute("SELECT config FROM runs WHERE id = ?", (run_id,)).fetchone()
        if row is None:
            raise KeyError(run_id)
        return row[0]

    def trials(self, run_id: int, phase: str = "base") -> List[TrialResult]:
        with self.lock:
            rows = self.conn.execute(
                "SELECT record FROM trials WHERE run_id = ? AND phase = ? ORDER BY id",
                (run_id, phase),
            ).fetchall()
        return [TrialResult.from_record(json.loads(r[0])) for r in rows]

    def phases(self, run_id: int) -> List[str]:
        with self.lock:
            rows = self.conn.execute(
                "SELECT DISTINCT phase FROM trials WHERE run_id = ? ORDER BY phase", (run_id,)
            ).fetchall()
        return [r[0] for r in rows]

    def count(self) -> int:
        with self.lock:
            return self.conn.execute("SELECT COUNT(*) FROM trials").fetchone()[0]

    def close(self):
        self.conn.close()

    def __enter__(self) -> "ResultStore":
        return self

    def __exit__(self, *exc):
        self.close()


def migrate(conn: sqlite3.Connection):
    """Create tables and indexes; add columns missing from older databases."""
    conn.execute("""
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            created TEXT NOT NULL,
            kind TEXT NOT NULL,
            config TEXT NOT NULL
        )
    """)
    run_columns = {row[1] for row in conn.execute("PRAGMA table_info(runs)").fetchall()}
    if "policies" not in run_columns:
        conn.execute("ALTER TABLE runs ADD COLUMN policies TEXT NOT NULL DEFAULT '[]'")

    conn.execute("""
        CREATE TABLE IF NOT EXISTS trials (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id INTEGER NOT NULL,
            trial INTEGER NOT NULL,
            seed INTEGER NOT NULL,
            policy TEXT NOT NULL,
            converged INTEGER NOT NULL,
            converge_time REAL,
            h_min REAL,
            infeasible_steps INTEGER NOT NULL,
            record TEXT NOT NULL,
            FOREIGN KEY (run_id) REFERENCES runs(id)
        )
    """)
    trial_columns = {row[1] for row in conn.execute("PRAGMA table_info(trials)").fetchall()}
    if "phase" not in trial_columns:
        conn.execute("ALTER TABLE trials ADD COLUMN phase TEXT NOT NULL DEFAULT 'base'")
    if "radius_margin" not in trial_columns:
        conn.execute("ALTER TABLE trials ADD COLUMN radius_margin REAL NOT NULL DEFAULT 0.0")
    if "scenario_hash" not in trial_columns:
        conn.execute("ALTER TABLE trials ADD COLUMN scenario_hash TEXT NOT NULL DEFAULT ''")

    conn.execute("CREATE INDEX IF NOT EXISTS idx_trials_run ON trials(run_id, phase)")
    conn.execute("CREATE INDEX IF NOT EXISTS idx_trials_policy ON trials(policy)")
    conn.commit()
