"""Per-step metric log (``metrics.csv``) and wall-clock log (``timings.csv``).

Floats are written with ``repr`` so a parsed file reproduces the rows exactly;
a missing value (no evaluation this step) is an empty field. Wall-clock time
lives in its own file so the metric log of a seeded run is byte-deterministic.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional

SCHEMA_VERSION = 1
INT_COLUMNS = ("schema", "t", "episode")
STR_COLUMNS = ("status",)


def metric_columns(n_members: int) -> List[str]:
    return (["schema", "t", "episode"] + [f"dyn_loss_{k}" for k in range(n_members)]
            + ["reward_loss", "mu", "sigma", "utility", "grad_norm", "eval_return", "status"])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(col: str, text: str):
    if text == "":
        return None
    if col in INT_COLUMNS:
        return int(text)
    if col in STR_COLUMNS:
        return text
    return float(text)


class MetricsWriter:
    """Streams rows to CSV; flushes whenever an episode boundary or evaluation
    is logged so a crashed run still leaves analysable output."""

    def __init__(self, path, n_members: int):
        self.path = Path(path)
        self.columns = metric_columns(n_members)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\r\n")
        self._writer.writerow(self.columns)
        self._fh.flush()
        self._last_t = 0
        self._episode = None

    def write(self, row: Dict) -> None:
        row = dict(row, schema=SCHEMA_VERSION)
        if row["t"] <= self._last_t:
            raise ValueError(f"metric rows must be strictly increasing in t ({row['t']} after {self._last_t})")
        self._last_t = row["t"]
        self._writer.writerow([_fmt(row.get(c)) for c in self.columns])
        if row.get("eval_return") is not None or row["episode"] != self._episode:
            self._fh.flush()
        self._episode = row["episode"]

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(path, rows: Iterable[Dict], n_members: int) -> None:
    with MetricsWriter(path, n_members) as w:
        for row in rows:
            w.write(row)


def read_metrics(path) -> List[Dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        return [{c: _parse(c, v) for c, v in zip(header, rec)} for rec in reader]


def write_timings(path, step_ms: List[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["t", "step_ms"])
        for t, ms in enumerate(step_ms, 1):
            w.writerow([t, repr(float(ms))])


def read_timings(path) -> List[float]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [float(ms) for _, ms in reader]


def eval_curve(rows: List[Dict], column: str = "eval_return"):
    """``(t, value)`` pairs for the rows where ``column`` is present and finite."""
    return [(r["t"], r[column]) for r in rows
            if r.get(column) is not None and not math.isnan(r[column])]
