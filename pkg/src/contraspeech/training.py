"""Shared training plumbing: named seed streams and loss logs.

All randomness in a run flows from one root seed through named sub-streams,
so changing e.g. the masking stream leaves batching and init untouched.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError

__all__ = ["seed_stream", "TrainLog", "STREAM_NAMES"]

STREAM_NAMES = ("data", "init", "distractor", "mask")


def seed_stream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named randomness stream."""
    if name not in STREAM_NAMES:
        raise ConfigError(f"unknown seed stream '{name}', expected one of {STREAM_NAMES}")
    key = STREAM_NAMES.index(name)
    return np.random.default_rng(np.random.SeedSequence(root_seed, spawn_key=(key,)))


class TrainLog:
    """Append-only per-step loss log: 'step<TAB>loss[<TAB>component...]' lines."""

    def __init__(self, columns: tuple[str, ...], path: Optional[Path] = None):
        self.columns = ("step",) + tuple(columns)
        self.rows: list[tuple] = []
        self._path = Path(path) if path is not None else None
        if self._path is not None:
            self._path.write_text("# " + "\t".join(self.columns) + "\n", encoding="utf-8")

    def log(self, step: int, *values: float) -> None:
        if len(values) != len(self.columns) - 1:
            raise ConfigError(
                f"expected {len(self.columns) - 1} values for columns {self.columns[1:]}")
        row = (step,) + tuple(float(v) for v in values)
        self.rows.append(row)
        if self._path is not None:
            line = "\t".join([str(step)] + [f"{v:.6f}" for v in row[1:]])
            with self._path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def column(self, name: str) -> np.ndarray:
        idx = self.columns.index(name)
        return np.array([row[idx] for row in self.rows])
