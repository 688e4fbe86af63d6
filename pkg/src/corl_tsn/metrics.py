"""Continual-learning metrics over the performance matrix.

``P[i, j]`` is the mean return on task j after training stage i. Only the
lower triangle (j <= i) enters the metrics; the rest is reported as-is.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PerformanceMatrix:
    values: np.ndarray  # (T, T)
    targets: np.ndarray  # (T,)
    task_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        T = len(self.task_ids)
        if self.values.shape != (T, T) or self.targets.shape != (T,):
            raise ValueError("performance matrix, targets and task ids disagree in size")

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    def summary(self, metric_kind: str) -> dict:
        out = {"final_returns": self.values[-1].tolist()}
        if metric_kind == "norm_avg":
            out["norm_avg"] = norm_avg(self.values, self.targets)
        else:
            out["avg_gap"] = avg_gap(self.values, self.targets)
        out["forgetting"] = [forgetting(self.values, j) for j in range(self.n_tasks)]
        out["avg_forgetting"] = avg_forgetting(self.values) if self.n_tasks >= 2 else 0.0
        return out


def norm_avg(P, targets) -> float:
    """Expert-normalized mean final return, in percent."""
    P = np.asarray(P, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(targets <= 0):
        raise ValueError("norm_avg needs strictly positive targets")
    return float(100.0 * np.mean(P[-1] / targets))


def forgetting(P, j: int) -> float:
    """Best return on task j at any stage from j on, minus its final return (0-based j)."""
    P = np.asarray(P, dtype=np.float64)
    N = P.shape[0]
    if not 0 <= j < N:
        raise IndexError(f"task index {j} outside 0..{N - 1}")
    return float(P[j:, j].max() - P[-1, j])


def avg_gap(P, targets) -> float:
    P = np.asarray(P, dtype=np.float64)
    return float(np.mean(np.abs(P[-1] - np.asarray(targets, dtype=np.float64))))


def avg_forgetting(P) -> float:
    """Mean forgetting over every task except the last one learned."""
    P = np.asarray(P, dtype=np.float64)
    N = P.shape[0]
    if N < 2:
        raise ValueError("avg_forgetting needs at least two tasks")
    return float(np.mean([forgetting(P, j) for j in range(N - 1)]))
