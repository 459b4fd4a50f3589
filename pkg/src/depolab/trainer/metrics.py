"""Evaluation-point metrics table and run manifest."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

COLUMNS = (
    "env_steps", "epoch", "mean_return", "success_rate", "planner_mse",
    "disc_loss", "q_loss", "depg_loss", "cdepg_loss", "supervised_loss",
    "invdyn_loss", "actor_loss",
    "disc_updates", "q_updates", "planner_updates", "invdyn_updates", "actor_updates",
)
COUNTERS = ("disc_updates", "q_updates", "planner_updates", "invdyn_updates", "actor_updates")


def _fmt(v) -> str:
    if isinstance(v, int):
        return str(v)
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, row: dict) -> None:
        missing = [c for c in COLUMNS if c not in row]
        if missing:
            raise ValueError(f"metrics row missing {missing}")
        if self.rows and row["env_steps"] < self.rows[-1]["env_steps"]:
            raise ValueError("env_steps must be non-decreasing")
        self.rows.append({c: row[c] for c in COLUMNS})

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def last(self, name: str):
        return self.rows[-1][name] if self.rows else float("nan")

    def steps_to(self, column: str, threshold: float) -> float:
        """First env-step count at which ``column >= threshold`` (inf if never)."""
        for r in self.rows:
            if r[column] >= threshold:
                return float(r["env_steps"])
        return float("inf")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in COLUMNS])
        return buf.getvalue()

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_csv())


def read_metrics(path: Union[str, Path]) -> MetricsLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty metrics file") from None
        if tuple(header) != COLUMNS:
            raise ValueError(f"{path}: unexpected metrics columns")
        log = MetricsLog()
        for line in reader:
            if len(line) != len(COLUMNS):
                raise ValueError(f"{path}: ragged row")
            row = {}
            for c, v in zip(COLUMNS, line):
                row[c] = int(v) if c in ("env_steps", "epoch") or c in COUNTERS else float(v)
            log.append(row)
    return log


def write_manifest(path: Union[str, Path], manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path: Union[str, Path]) -> dict:
    return json.loads(Path(path).read_text())


def empty_row(env_steps: int, epoch: int, counters: Optional[dict] = None) -> dict:
    row = {c: float("nan") for c in COLUMNS}
    row.update(env_steps=int(env_steps), epoch=int(epoch))
    for c in COUNTERS:
        row[c] = int((counters or {}).get(c, 0))
    return row
