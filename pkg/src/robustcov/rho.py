"""Bounded rho/weight families for squared Mahalanobis distances.

Three families: the bisquare, the "optimal" (piecewise linear/quartic with
knots at 4 and 9) and the Rocke biflat band weight. All rho functions are
normalized to rho(0) = 0, nondecreasing, sup rho = 1, and all take the
*squared* distance as their argument. Tuning enters purely as an argument
divisor, so scaling a spec composes instead of re-deriving anything.

The "optimal" rho is constructed as the exact integral of its weight
function divided by the total mass 6.5; this keeps rho continuous at the
knots and rho' exactly proportional to the weight. The closed forms are

    rho(d) = d / 6.5                                          d <= 4
    rho(d) = (3.584 - 1.944 d + 0.864 d^2 - 0.104 d^3
              + 0.004 d^4) / 6.5                              4 < d <= 9
    rho(d) = 1                                                d > 9
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .linalg import chi2_quantile

GAMMA_MIN = 1e-3


class RhoFamily(str, Enum):
    BISQUARE = "bisquare"
    OPTIMAL = "optimal"
    ROCKE_BIFLAT = "rocke-biflat"


@dataclass(frozen=True)
class RhoSpec:
    """A rho/weight family together with its argument scaling.

    ``scale`` is the divisor applied to the argument: evaluations are of the
    base family at ``t / scale``. For the Rocke family the band half-width
    ``gamma`` (derived from alpha via the chi-square quantile) replaces the
    scale as the tuning handle; ``alpha`` is retained for provenance only.
    """

    family: RhoFamily
    scale: float = 1.0
    gamma: float | None = None
    alpha: float | None = None

    def __post_init__(self):
        if self.scale <= 0 or not np.isfinite(self.scale):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.family is RhoFamily.ROCKE_BIFLAT:
            if self.gamma is None:
                raise ValueError("rocke-biflat spec requires gamma")
            if not (GAMMA_MIN <= self.gamma <= 1.0):
                raise ValueError(f"gamma must lie in [{GAMMA_MIN}, 1], got {self.gamma}")
        elif self.gamma is not None:
            raise ValueError(f"gamma is meaningless for family {self.family.value}")


def bisquare(c: float = 1.0) -> RhoSpec:
    return RhoSpec(family=RhoFamily.BISQUARE, scale=c)


def optimal(c: float = 1.0) -> RhoSpec:
    return RhoSpec(family=RhoFamily.OPTIMAL, scale=c)


def rocke_biflat(p: int | None = None, alpha: float | None = None,
                 gamma: float | None = None) -> RhoSpec:
    """Rocke spec from either an explicit gamma or a (p, alpha) pair."""
    if gamma is None:
        if p is None or alpha is None:
            raise ValueError("provide gamma, or both p and alpha")
        gamma = rocke_gamma(p, alpha)
    gamma = min(1.0, max(GAMMA_MIN, float(gamma)))
    return RhoSpec(family=RhoFamily.ROCKE_BIFLAT, gamma=gamma, alpha=alpha)


def rocke_gamma(p: int, alpha: float) -> float:
    """Band half-width ``min(1, chi2_p(1 - alpha)/p - 1)``, floored at GAMMA_MIN."""
    if p < 2:
        raise ValueError(f"p must be >= 2, got {p}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    g = chi2_quantile(p, 1.0 - alpha) / p - 1.0
    return min(1.0, max(GAMMA_MIN, g))


def scaled(spec: RhoSpec, divisor: float) -> RhoSpec:
    """Spec whose rho/weight evaluate the base family at ``t / divisor``."""
    if divisor <= 0 or not np.isfinite(divisor):
        raise ValueError(f"divisor must be positive, got {divisor}")
    return replace(spec, scale=spec.scale * divisor)


# Optimal-family polynomial pieces (weight q on (4, 9], rho numerator s).
_OPT_Q = np.array([0.016, -0.312, 1.728, -1.944])           # q(d), highest degree first
_OPT_S = np.array([0.004, -0.104, 0.864, -1.944, 3.584])    # s(d) = integral of q, + const
_OPT_MASS = 6.5                                              # total integral of W_opt


def _rho_bisquare(t):
    tm = np.minimum(t, 1.0)
    return 1.0 - (1.0 - tm) ** 3


def _w_bisquare(t):
    tm = np.minimum(t, 1.0)
    return 3.0 * (1.0 - tm) ** 2


def _rho_optimal(t):
    out = np.empty_like(t)
    lo = t <= 4.0
    hi = t > 9.0
    mid = ~(lo | hi)
    out[lo] = t[lo] / _OPT_MASS
    # clip: the quartic rounds a hair past 1 near the upper knot
    out[mid] = np.clip(np.polyval(_OPT_S, t[mid]) / _OPT_MASS, 0.0, 1.0)
    out[hi] = 1.0
    return out


def _w_optimal(t):
    out = np.empty_like(t)
    lo = t <= 4.0
    hi = t > 9.0
    mid = ~(lo | hi)
    out[lo] = 1.0
    out[mid] = np.polyval(_OPT_Q, t[mid])
    out[hi] = 0.0
    return out


def _rho_rocke(t, gamma):
    u = np.clip((t - 1.0) / gamma, -1.0, 1.0)
    return (3.0 * u - u ** 3 + 2.0) / 4.0


def _w_rocke(t, gamma):
    u = np.clip((t - 1.0) / gamma, -1.0, 1.0)
    return 1.0 - u ** 2


def _eval(spec: RhoSpec, t, base_bisq, base_opt, base_rocke):
    t_in = np.asarray(t, dtype=float)
    if np.any(t_in < 0):
        raise ValueError("rho/weight arguments must be nonnegative")
    scalar = t_in.ndim == 0
    ts = np.atleast_1d(t_in) / spec.scale
    if spec.family is RhoFamily.BISQUARE:
        out = base_bisq(ts)
    elif spec.family is RhoFamily.OPTIMAL:
        out = base_opt(ts)
    else:
        out = base_rocke(ts, spec.gamma)
    return float(out[0]) if scalar else out


def rho(spec: RhoSpec, t):
    """rho(t), in [0, 1], nondecreasing, rho(0) = 0."""
    return _eval(spec, t, _rho_bisquare, _rho_optimal, _rho_rocke)


def weight(spec: RhoSpec, t):
    """Weight function in the paper normalization (W(0)=3 bisquare, W(0)=1
    optimal, W(1)=1 Rocke); proportional to drho/dt family by family."""
    return _eval(spec, t, _w_bisquare, _w_optimal, _w_rocke)


def rho_prime(spec: RhoSpec, t):
    """Exact derivative drho/dt, including the argument-scaling chain rule.

    Needed wherever rho functions with different normalizations are mixed
    (the tau-estimator weights); for pure reweighting the proportional
    ``weight`` is interchangeable.
    """
    w = weight(spec, t)
    if spec.family is RhoFamily.BISQUARE:
        k = 1.0
    elif spec.family is RhoFamily.OPTIMAL:
        k = 1.0 / _OPT_MASS
    else:
        k = 3.0 / (4.0 * spec.gamma)
    return w * (k / spec.scale)
