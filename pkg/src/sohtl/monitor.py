"""T²/Q statistics, KDE control limits and the source/target similarity gate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .cva import CvProjection
from .errors import InsufficientData, InvalidInput, ShapeError

SIGMA_FLOOR = 1e-12
BISECT_RTOL = 1e-6


@dataclass(frozen=True, eq=False)
class CycleStatistics:
    cycle_index: int
    t2: np.ndarray
    q: np.ndarray


@dataclass(frozen=True, eq=False)
class ControlLimitProfile:
    beta: float
    cl_t2: np.ndarray
    cl_q: np.ndarray
    cycle_indices: tuple = ()

    def __len__(self):
        return len(self.cl_t2)

    def head(self, n: int) -> "ControlLimitProfile":
        return ControlLimitProfile(self.beta, self.cl_t2[:n], self.cl_q[:n], tuple(self.cycle_indices[:n]))

    def scaled(self, factor: float) -> "ControlLimitProfile":
        return ControlLimitProfile(self.beta, self.cl_t2 * factor, self.cl_q * factor, self.cycle_indices)


@dataclass(frozen=True)
class SimilarityVerdict:
    s1_pass: bool
    s2_pass: bool
    similar: bool
    s1_fraction: float
    s2_fraction: float
    cycles_compared: int

    def render(self) -> str:
        return (
            f"similar={str(self.similar).lower()} s1={self.s1_fraction:.3f} "
            f"s2={self.s2_fraction:.3f} cycles={self.cycles_compared}"
        )


def cycle_statistics(projection: CvProjection) -> list[CycleStatistics]:
    """Per-column T² (retained space) and Q (residual space), grouped by cycle."""
    if projection.cv.shape[1] != projection.rv.shape[1]:
        raise ShapeError("cv and rv column counts differ")
    if sum(projection.columns_per_cycle) != projection.cv.shape[1]:
        raise ShapeError("columns_per_cycle does not add up to the column count")
    t2 = np.einsum("ij,ij->j", projection.cv, projection.cv)
    q = np.einsum("ij,ij->j", projection.rv, projection.rv)
    indices = projection.cycle_indices or tuple(range(1, len(projection.columns_per_cycle) + 1))
    return [
        CycleStatistics(k, t2[sl], q[sl])
        for k, sl in zip(indices, projection.cycle_slices())
    ]


def kde_control_limit(samples, beta: float) -> float:
    """Smallest x whose Gaussian-KDE CDF reaches ``beta``.

    Bandwidth follows Silverman's rule ``1.06 * sigma * n**(-1/5)``. When the
    samples have (numerically) zero spread the empirical quantile is returned.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise InsufficientData("need at least 2 samples for a control limit")
    if not 0 < beta < 1:
        raise InvalidInput(f"beta must be in (0, 1), got {beta}")
    sigma = x.std(ddof=1)
    if not sigma >= SIGMA_FLOOR:
        return float(np.quantile(x, beta))
    h = 1.06 * sigma * x.size ** (-0.2)

    def cdf(v):
        return ndtr((v - x) / h).mean()

    lo, hi = x.min() - 4 * h, x.max() + 4 * h
    # invariant: cdf(lo) < beta <= cdf(hi)
    for _ in range(200):
        if hi - lo <= BISECT_RTOL * max(abs(lo), abs(hi), h):
            break
        mid = 0.5 * (lo + hi)
        if cdf(mid) >= beta:
            hi = mid
        else:
            lo = mid
    return float(hi)


def control_limit_profile(stats: Sequence[CycleStatistics], beta: float) -> ControlLimitProfile:
    cl_t2 = np.array([kde_control_limit(s.t2, beta) for s in stats])
    cl_q = np.array([kde_control_limit(s.q, beta) for s in stats])
    return ControlLimitProfile(float(beta), cl_t2, cl_q, tuple(s.cycle_index for s in stats))


def _within_fraction(source: np.ndarray, target: np.ndarray, zone: float) -> float:
    # zero source limit with non-zero target fails the test naturally
    inside = np.abs(target - source) <= zone * source
    return float(inside.mean())


def similarity_gate(
    source: ControlLimitProfile,
    target: ControlLimitProfile,
    error_zone: float = 0.15,
    pass_fraction: float = 0.90,
) -> SimilarityVerdict:
    if len(source) != len(target) or len(source.cl_q) != len(target.cl_q):
        raise ShapeError(f"profiles cover {len(source)} and {len(target)} cycles")
    if len(source) == 0:
        raise InsufficientData("empty control-limit profiles")
    if not math.isclose(source.beta, target.beta):
        raise InvalidInput(f"profiles use different beta ({source.beta} vs {target.beta})")
    if error_zone < 0 or not 0 < pass_fraction <= 1:
        raise InvalidInput("error_zone must be >= 0 and pass_fraction in (0, 1]")
    s1 = _within_fraction(source.cl_t2, target.cl_t2, error_zone)
    s2 = _within_fraction(source.cl_q, target.cl_q, error_zone)
    s1_pass = s1 >= pass_fraction - 1e-12
    s2_pass = s2 >= pass_fraction - 1e-12
    return SimilarityVerdict(s1_pass, s2_pass, s1_pass and s2_pass, s1, s2, len(source))
