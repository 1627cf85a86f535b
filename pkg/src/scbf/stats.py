"""Monte-Carlo estimates with standard errors; order-insensitive reductions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    flagged: bool = False
    note: str = ""

    def __iter__(self):
        yield self.value
        yield self.se


def exact_mean(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Correctly rounded mean along an axis, independent of summation order."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.float64(math.fsum(x) / len(x))
    moved = np.moveaxis(x, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    out = np.array([math.fsum(row) for row in flat]) / moved.shape[-1]
    return out.reshape(moved.shape[:-1])


def mean_se(x: np.ndarray) -> Estimate:
    """Sample mean and its standard error for independent draws."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    m = float(exact_mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return Estimate(m, se)


def jackknife(stat: Callable[[np.ndarray], float | np.ndarray], values: np.ndarray,
              groups: np.ndarray, ) -> tuple:
    """Delete-one-group jackknife of stat(values[mask]).

    Returns (full-sample statistic, standard error).
    """
    values = np.asarray(values)
    groups = np.asarray(groups)
    labels = np.unique(groups)
    full = np.asarray(stat(values), dtype=float)
    G = len(labels)
    if G < 2:
        return full, np.full_like(full, np.inf)
    reps = np.array([stat(values[groups != g]) for g in labels], dtype=float)
    centre = reps.mean(axis=0)
    se = np.sqrt((G - 1) / G * np.sum((reps - centre) ** 2, axis=0))
    return full, se


def jackknife_mean(values: np.ndarray, groups: np.ndarray) -> Estimate:
    """Mean with jackknife SE over groups of correlated samples.

    Uses per-group sums so the cost is linear in the number of samples.
    """
    values = np.asarray(values, dtype=float)
    labels, inv = np.unique(groups, return_inverse=True)
    G = len(labels)
    sums = np.bincount(inv, weights=values, minlength=G)
    counts = np.bincount(inv, minlength=G).astype(float)
    total, n = math.fsum(sums), counts.sum()
    full = total / n
    if G < 2:
        return Estimate(full, math.inf)
    reps = (total - sums) / (n - counts)
    se = math.sqrt((G - 1) / G * np.sum((reps - reps.mean()) ** 2))
    return Estimate(full, se)


def group_block_ids(n: int, n_blocks: int) -> np.ndarray:
    """Contiguous block labels 0..n_blocks-1 for n items."""
    return (np.arange(n) * n_blocks) // max(n, 1)


def combined_se(*ses: float) -> float:
    return math.sqrt(sum(s * s for s in ses))
