"""Robust scales of squared-distance vectors: M-scale, tau-scale, median.

The M-scale S of d = (d_1, ..., d_n) solves mean(rho(d_i / S)) = delta.
Because rho is nondecreasing and bounded, h(S) = mean rho(d_i/S) is
continuous and nonincreasing in S, so the equation has a unique crossing
whenever enough entries are strictly positive; we bracket it and hand the
bracket to Brent's method.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateScaleError, ScaleConvergenceError
from .rho import RhoSpec, rho, scaled


@dataclass(frozen=True)
class MScaleParams:
    """Parameters of the M-scale equation mean rho(d/S) = delta."""

    delta: float
    rho: RhoSpec
    rtol: float = 9e-16  # brentq floor is 4 * machine eps
    max_expand: int = 60

    def __post_init__(self):
        if not 0.0 < self.delta <= 0.5:
            raise ValueError(f"delta must lie in (0, 0.5], got {self.delta}")


def breakdown_delta(n: int, p: int) -> float:
    """delta attaining the maximum finite-sample breakdown point, 0.5(1 - p/n)."""
    if n <= p:
        raise ValueError(f"need n > p, got n={n}, p={p}")
    return 0.5 * (1.0 - p / n)


def mscale(d: np.ndarray, params: MScaleParams) -> float:
    """Solve mean(rho(d_i / S)) = delta for S > 0.

    Zero entries contribute rho(0) = 0; the equation becomes unsolvable when
    more than n(1 - delta) entries are zero, which is reported as a
    degenerate scale.
    """
    d = np.asarray(d, dtype=float)
    n = d.shape[0]
    if n == 0:
        raise DegenerateScaleError("empty distance vector")
    delta = params.delta
    pos = d[d > 0.0]
    if pos.shape[0] < n * delta:
        raise DegenerateScaleError(
            f"{n - pos.shape[0]} of {n} distances are zero; "
            f"M-scale equation with delta={delta} unsolvable"
        )

    def h(s: float) -> float:
        return float(np.mean(rho(params.rho, d / s))) - delta

    s0 = float(np.median(pos))
    lo, hi = s0 * 1e-3, s0 * 1e3
    expand = 0
    while h(lo) < 0.0:
        lo *= 1e-2
        expand += 1
        if expand > params.max_expand:
            raise ScaleConvergenceError("no lower bracket for the M-scale")
    expand = 0
    while h(hi) > 0.0:
        hi *= 1e2
        expand += 1
        if expand > params.max_expand:
            raise ScaleConvergenceError("no upper bracket for the M-scale")
    return float(brentq(h, lo, hi, rtol=params.rtol, maxiter=200))


def tau_scale(d: np.ndarray, rho1: RhoSpec, c: float, delta: float) -> tuple[float, float]:
    """Two-stage tau-scale of a squared-distance vector.

    sigma0 is the M-scale under rho1; the tau-scale is
    sigma = sigma0 * mean(rho2(d_i / sigma0)) with rho2(t) = rho1(t / c).
    Returns (sigma0, sigma).
    """
    if c <= 0:
        raise ValueError(f"c must be positive, got {c}")
    sigma0 = mscale(d, MScaleParams(delta=delta, rho=rho1))
    rho2 = scaled(rho1, c)
    sigma = sigma0 * float(np.mean(rho(rho2, np.asarray(d, dtype=float) / sigma0)))
    return sigma0, sigma


def median_scale(d: np.ndarray) -> float:
    """Sample median (mean-of-two-middle convention for even n)."""
    d = np.asarray(d, dtype=float)
    if d.shape[0] == 0:
        raise DegenerateScaleError("empty distance vector")
    return float(np.median(d))
