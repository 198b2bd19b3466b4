"""Incremental-learning summary metrics over a lower-triangular accuracy matrix.

``A[i][j]`` is the test accuracy (percent) on task ``j`` right after training
task ``i`` (0-based here), defined for ``j <= i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def _rows(matrix) -> list[list[float]]:
    rows = [list(map(float, r)) for r in matrix]
    if not rows:
        raise ConfigError("accuracy matrix is empty")
    for i, row in enumerate(rows):
        if len(row) < i + 1:
            raise ConfigError(f"accuracy matrix row {i + 1} has {len(row)} entries, needs {i + 1}")
    return rows


def final_avg_acc(matrix) -> float:
    rows = _rows(matrix)
    k = len(rows)
    return float(np.mean(rows[-1][:k]))


def backward_forgetting(matrix) -> tuple[float, bool]:
    """Mean drop ``A[j][j] - A[K][j]`` over earlier tasks.

    Returns ``(value, defined)``; a single-task run has no earlier task and
    reports ``(0.0, False)``.
    """
    rows = _rows(matrix)
    k = len(rows)
    if k < 2:
        return 0.0, False
    drops = [rows[j][j] - rows[-1][j] for j in range(k - 1)]
    return float(np.mean(drops)), True


def global_avg_acc(matrix) -> float:
    rows = _rows(matrix)
    return float(np.mean([np.mean(row[: i + 1]) for i, row in enumerate(rows)]))


@dataclass
class MetricsReport:
    acc: float
    bwf: float
    gaa: float
    bwf_defined: bool
    rows: list[list[float]]


def summarize(matrix) -> MetricsReport:
    rows = _rows(matrix)
    bwf, defined = backward_forgetting(rows)
    return MetricsReport(final_avg_acc(rows), bwf, global_avg_acc(rows), defined, rows)
