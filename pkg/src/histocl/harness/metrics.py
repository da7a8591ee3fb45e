"""Accuracy matrix and the derived continual-learning metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ShapeMismatchError


@dataclass(frozen=True)
class AccMatrix:
    """T x T accuracies: row i holds accuracy on every test set after
    finishing training experience i (past, current and future sets alike)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeMismatchError(f"accuracy matrix must be square, got {v.shape}")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ValueError("accuracies must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def n_experiences(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MetricSet:
    acc: float
    bwt: float
    fwt: float


def compute_metrics(m: AccMatrix | np.ndarray, chance: Sequence[float]) -> MetricSet:
    """Final average accuracy, backward transfer and forward transfer.

    ACC = mean of the last row. BWT averages R[T-1][j] - R[j][j] over past
    test sets. FWT averages R[j-1][j] - chance_j over not-yet-trained sets,
    with ``chance`` the per-experience chance-level accuracy. Single-
    experience streams report BWT = FWT = 0.
    """
    r = m.values if isinstance(m, AccMatrix) else AccMatrix(np.asarray(m)).values
    t = r.shape[0]
    if len(chance) != t:
        raise ShapeMismatchError(f"chance has length {len(chance)}, expected {t}")
    acc = float(r[t - 1].mean())
    if t < 2:
        return MetricSet(acc=acc, bwt=0.0, fwt=0.0)
    bwt = float(np.mean([r[t - 1][j] - r[j][j] for j in range(t - 1)]))
    fwt = float(np.mean([r[j - 1][j] - chance[j] for j in range(1, t)]))
    return MetricSet(acc=acc, bwt=bwt, fwt=fwt)


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and sample standard deviation (n - 1; 0 for n = 1)."""
    if len(values) == 0:
        raise ValueError("at least one value required")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = 0.0 if len(arr) == 1 else float(arr.std(ddof=1))
    return mean, std
