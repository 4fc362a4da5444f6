"""Canonical variate analysis on lagged synchronized cycles.

Each cycle is expanded into past/future Hankel blocks, the blocks of all
cycles are concatenated column-wise, and the SVD of the whitened
future/past cross-covariance splits the past space into retained canonical
variates (CVs) and residual variates (RVs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CycleTooShort, InsufficientData, InvalidInput, NumericalError, ShapeError

STD_FLOOR = 1e-8
EIG_FLOOR = 1e-10
CUMULATIVE_SHARE = 0.90


@dataclass(frozen=True)
class LagSpec:
    p: int
    f: int

    def __post_init__(self):
        if self.p < 1 or self.f < 1:
            raise InvalidInput(f"lags must be >= 1, got p={self.p}, f={self.f}")

    @property
    def window(self) -> int:
        return self.p + self.f


@dataclass(frozen=True, eq=False)
class HankelPair:
    past: np.ndarray
    future: np.ndarray
    columns_per_cycle: tuple
    cycle_indices: tuple = ()

    @property
    def H(self) -> int:
        return self.past.shape[1]


@dataclass(frozen=True, eq=False)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        return apply_normalizer(self, matrix)


@dataclass(frozen=True, eq=False)
class CvaModel:
    lag: LagSpec
    normalizer_past: Normalizer
    normalizer_future: Normalizer
    whitener: np.ndarray
    singular_values: np.ndarray
    retained_count: int
    J_c: np.ndarray
    J_r: np.ndarray
    V: np.ndarray  # right singular vectors of the past side, one per column


@dataclass(frozen=True, eq=False)
class CvProjection:
    cv: np.ndarray
    rv: np.ndarray
    columns_per_cycle: tuple
    cycle_indices: tuple = ()

    def cycle_slices(self):
        start = 0
        for n in self.columns_per_cycle:
            yield slice(start, start + n)
            start += n


def hankel_blocks(x: np.ndarray, lag: LagSpec) -> tuple[np.ndarray, np.ndarray]:
    """Past/future blocks of one series, columns ordered by descending anchor.

    For anchor ``i`` (0-based, ``p <= i <= m - f``) the past column is
    ``x[i-1], ..., x[i-p]`` and the future column ``x[i], ..., x[i+f-1]``.
    """
    m = len(x)
    anchors = np.arange(m - lag.f, lag.p - 1, -1)
    past = x[anchors[None, :] - np.arange(1, lag.p + 1)[:, None]]
    future = x[anchors[None, :] + np.arange(lag.f)[:, None]]
    return past, future


def build_hankel(series_set: Sequence, lag: LagSpec) -> HankelPair:
    if len(series_set) == 0:
        raise InsufficientData("no series to build a Hankel matrix from")
    pasts, futures, counts, indices = [], [], [], []
    for k, s in enumerate(series_set):
        values = np.asarray(getattr(s, "values", s), dtype=float)
        index = getattr(s, "source_cycle_index", k + 1)
        if len(values) < lag.window:
            raise CycleTooShort(index, len(values), lag.window)
        if not np.all(np.isfinite(values)):
            raise InvalidInput(f"cycle {index}: non-finite synchronized value")
        past, future = hankel_blocks(values, lag)
        pasts.append(past)
        futures.append(future)
        counts.append(past.shape[1])
        indices.append(index)
    return HankelPair(np.hstack(pasts), np.hstack(futures), tuple(counts), tuple(indices))


def fit_normalizer(matrix: np.ndarray) -> Normalizer:
    """Row-wise mean and sample standard deviation (``ddof=1``)."""
    X = np.asarray(matrix, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise InsufficientData("need at least 2 columns to fit a normalizer")
    mean = X.mean(axis=1)
    std = np.maximum(X.std(axis=1, ddof=1), STD_FLOOR)
    return Normalizer(mean, std)


def apply_normalizer(norm: Normalizer, matrix: np.ndarray) -> np.ndarray:
    X = np.asarray(matrix, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(norm.mean):
        raise ShapeError(f"normalizer has {len(norm.mean)} rows, matrix has shape {X.shape}")
    return (X - norm.mean[:, None]) / norm.std[:, None]


def inv_sqrt(S: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root with relative eigenvalue floor."""
    w, Q = np.linalg.eigh(S)
    top = w.max()
    if not np.isfinite(top) or top <= 0:
        raise NumericalError("covariance matrix is not positive")
    w = np.maximum(w, EIG_FLOOR * top)
    return (Q / np.sqrt(w)) @ Q.T


def _fix_signs(V: np.ndarray) -> np.ndarray:
    V = V.copy()
    for k in range(V.shape[1]):
        if V[np.argmax(np.abs(V[:, k])), k] < 0:
            V[:, k] = -V[:, k]
    return V


def fit_cva(hankel: HankelPair, retained: int | None = None) -> CvaModel:
    Xp_raw, Xf_raw = hankel.past, hankel.future
    p, H = Xp_raw.shape
    f = Xf_raw.shape[0]
    if H < p + f:
        raise InsufficientData(f"need at least p+f={p + f} Hankel columns, got {H}")
    norm_p = fit_normalizer(Xp_raw)
    norm_f = fit_normalizer(Xf_raw)
    Xp = apply_normalizer(norm_p, Xp_raw)
    Xf = apply_normalizer(norm_f, Xf_raw)

    S_pp = Xp @ Xp.T / (H - 1)
    S_ff = Xf @ Xf.T / (H - 1)
    S_fp = Xf @ Xp.T / (H - 1)
    if not (np.all(np.isfinite(S_pp)) and np.all(np.isfinite(S_ff)) and np.all(np.isfinite(S_fp))):
        raise NumericalError("non-finite covariance")

    W_p = inv_sqrt(S_pp)
    W_f = inv_sqrt(S_ff)
    # f x p, so right singular vectors live in the past space
    M = W_f @ S_fp @ W_p
    _, alpha, Vt = np.linalg.svd(M, full_matrices=True)
    V = _fix_signs(Vt.T)
    s = len(alpha)

    C = select_retained(alpha) if retained is None else int(retained)
    if not 1 <= C <= s:
        raise InvalidInput(f"retained count must be in [1, {s}], got {C}")
    V_c = V[:, :C]
    J_c = V_c.T @ W_p
    J_r = (np.eye(p) - V_c @ V_c.T) @ W_p
    return CvaModel(LagSpec(p, f), norm_p, norm_f, W_p, alpha, C, J_c, J_r, V)


def _fallback_count(alpha: np.ndarray) -> int:
    total = alpha.sum()
    if total <= 0:
        return len(alpha)
    share = np.cumsum(alpha) / total
    return int(np.argmax(share >= CUMULATIVE_SHARE - 1e-12)) + 1


def select_retained(singular_values) -> int:
    """Elbow of the cumulative singular-value curve.

    Straight lines are fitted to the first 15 and the last 5 points of the
    curve; the rounded x-coordinate of their crossing is the retained count.
    Short spectra, parallel lines or crossings outside ``[1, s]`` fall back to
    the smallest count reaching a 90% cumulative share.
    """
    alpha = np.asarray(singular_values, dtype=float)
    if alpha.size == 0:
        raise InvalidInput("no singular values")
    s = alpha.size
    if s < 20:
        return _fallback_count(alpha)
    curve = np.cumsum(alpha)
    x = np.arange(1, s + 1, dtype=float)
    a1, b1 = np.polyfit(x[:15], curve[:15], 1)
    a2, b2 = np.polyfit(x[-5:], curve[-5:], 1)
    if math.isclose(a1, a2, rel_tol=1e-9, abs_tol=1e-12):
        return _fallback_count(alpha)
    xc = (b2 - b1) / (a1 - a2)
    if not (np.isfinite(xc) and 1 <= xc <= s):
        return _fallback_count(alpha)
    return int(min(max(math.floor(xc + 0.5), 1), s))


def project(model: CvaModel, past: np.ndarray, columns_per_cycle=None, cycle_indices=()) -> CvProjection:
    """CVs and RVs of an already normalized past matrix."""
    X = np.asarray(past, dtype=float)
    if X.ndim != 2 or X.shape[0] != model.lag.p:
        raise ShapeError(f"past matrix must have {model.lag.p} rows, got shape {X.shape}")
    if columns_per_cycle is None:
        columns_per_cycle = (X.shape[1],)
    if sum(columns_per_cycle) != X.shape[1]:
        raise ShapeError("columns_per_cycle does not add up to the column count")
    return CvProjection(model.J_c @ X, model.J_r @ X, tuple(columns_per_cycle), tuple(cycle_indices))


def transform(model: CvaModel, series_set: Sequence) -> CvProjection:
    """Hankel, source normalization and projection in one step."""
    hankel = build_hankel(series_set, model.lag)
    past = apply_normalizer(model.normalizer_past, hankel.past)
    return project(model, past, hankel.columns_per_cycle, hankel.cycle_indices)
