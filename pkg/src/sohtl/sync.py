"""Cycle synchronization by dynamic time warping.

Every discharge cycle is aligned to a reference cycle and re-expressed as a
time-index series: for each reference sample ``i`` the value is the (mean)
target sample index that DTW matched to it. The result always has the
reference length, whatever the length of the cycle being synchronized.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput


@dataclass(frozen=True)
class WarpingPath:
    steps: tuple  # ((i, j), ...) with i on the reference, j on the target
    cost: float

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True, eq=False)
class SynchronizedSeries:
    values: np.ndarray
    source_cycle_index: int

    def __len__(self):
        return len(self.values)


def _as_series(x, name):
    a = np.asarray(x, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise InvalidInput(f"{name} must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite values")
    return a


def _cost_to_go(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cumulative cost from each cell to the end cell ``(m-1, n-1)``.

    Filled one anti-diagonal at a time; every cell gets exactly the scalar
    recurrence ``R[i, j] = |a_i - b_j| + min(R[i+1, j+1], R[i+1, j], R[i, j+1])``.
    """
    m, n = len(a), len(b)
    R = np.full((m + 1, n + 1), np.inf)
    R[m - 1, n - 1] = abs(a[m - 1] - b[n - 1])
    for d in range(m + n - 3, -1, -1):
        i = np.arange(max(0, d - n + 1), min(m - 1, d) + 1)
        j = d - i
        best = np.minimum(np.minimum(R[i + 1, j + 1], R[i + 1, j]), R[i, j + 1])
        R[i, j] = np.abs(a[i] - b[j]) + best
    return R


def dtw_path(reference, target) -> WarpingPath:
    """Minimum-cost alignment under ``|a - b|`` with unit moves.

    The path is traced forward from ``(0, 0)`` over the cost-to-go table.
    Among equally cheap moves the diagonal wins, then the move advancing the
    reference only, then the move advancing the target only.
    """
    a = _as_series(reference, "reference")
    b = _as_series(target, "target")
    m, n = len(a), len(b)
    R = _cost_to_go(a, b)
    steps = [(0, 0)]
    i = j = 0
    while i < m - 1 or j < n - 1:
        ni, nj = i + 1, j + 1
        best = R[ni, nj]
        step = (ni, nj)
        if R[ni, j] < best:
            best, step = R[ni, j], (ni, j)
        if R[i, nj] < best:
            step = (i, nj)
        i, j = step
        steps.append(step)
    return WarpingPath(tuple(steps), float(R[0, 0]))


def collapse_path(path: WarpingPath, m: int) -> np.ndarray:
    """Mean target index matched to each of the ``m`` reference samples."""
    steps = np.asarray(path.steps, dtype=np.int64)
    sums = np.bincount(steps[:, 0], weights=steps[:, 1], minlength=m)
    counts = np.bincount(steps[:, 0], minlength=m)
    return sums / counts


def synchronize_cycle(reference, target, cycle_index: int = 0) -> SynchronizedSeries:
    ref = _as_series(reference, "reference")
    path = dtw_path(ref, target)
    return SynchronizedSeries(collapse_path(path, len(ref)), cycle_index)


def _threads():
    try:
        return max(1, int(os.environ.get("SOH_THREADS", "1")))
    except ValueError:
        return 1


def synchronize_battery(reference, battery, max_cycles: int | None = None) -> list[SynchronizedSeries]:
    ref = _as_series(reference, "reference")
    cycles = battery.cycles if max_cycles is None else battery.cycles[:max_cycles]

    def one(c):
        return synchronize_cycle(ref, c.voltage, c.cycle_index)

    workers = _threads()
    if workers == 1 or len(cycles) < 2:
        return [one(c) for c in cycles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, cycles))
