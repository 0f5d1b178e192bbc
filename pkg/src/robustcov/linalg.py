"""Dense SPD kernels, chi-square quantiles and seeded RNG streams.

Everything downstream works with *squared* Mahalanobis distances and with
scatter matrices split into a unit-determinant shape and a scalar size,
so the primitives here enforce that decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import gammainc, gammaln, ndtri

from .errors import DataError, DegenerateScatterError, SingularScatterError

_DET_TOL = 1e-8
_MASK64 = (1 << 64) - 1


def validate_data(X) -> np.ndarray:
    """Coerce ``X`` to a float (n, p) array and check the sample contract.

    Requires n >= p + 1 rows, p >= 2 columns and finite entries.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DataError(f"expected a 2-d sample matrix, got ndim={X.ndim}")
    n, p = X.shape
    if p < 2:
        raise DataError(f"need at least 2 variables, got p={p}")
    if n < p + 1:
        raise DataError(f"need at least p+1={p + 1} observations, got n={n}")
    if not np.isfinite(X).all():
        raise DataError("sample contains non-finite entries")
    return X


@dataclass(frozen=True)
class LocationScatter:
    """Location vector plus a det-1 shape matrix and a scalar size.

    The full scatter is ``size * shape``; keeping the determinant pinned to
    one separates the shape estimation problem from the size calibration.
    """

    mu: np.ndarray
    shape: np.ndarray
    size: float = 1.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        shape = np.asarray(self.shape, dtype=float)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "shape", shape)
        p = mu.shape[0]
        if shape.shape != (p, p):
            raise DegenerateScatterError(
                f"shape is {shape.shape}, expected ({p}, {p})"
            )
        if not np.allclose(shape, shape.T, atol=1e-10, rtol=0.0):
            raise DegenerateScatterError("shape matrix is not symmetric")
        sign, logdet = np.linalg.slogdet(shape)
        if sign <= 0 or not np.isfinite(logdet):
            raise DegenerateScatterError("shape determinant is not positive")
        if abs(np.expm1(logdet)) > 1e-6:
            raise DegenerateScatterError(
                f"shape determinant deviates from 1 by {abs(np.expm1(logdet)):.3e}"
            )
        if not (self.size > 0) or not np.isfinite(self.size):
            raise DegenerateScatterError(f"size must be positive, got {self.size}")

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    @property
    def scatter(self) -> np.ndarray:
        """Full scatter matrix ``size * shape``."""
        return self.size * self.shape

    @classmethod
    def from_scatter(cls, mu, sigma) -> "LocationScatter":
        """Split a full scatter matrix into (shape, size)."""
        shape, size = normalize_shape(np.asarray(sigma, dtype=float))
        return cls(mu=np.asarray(mu, dtype=float), shape=shape, size=size)


def normalize_shape(S: np.ndarray) -> tuple[np.ndarray, float]:
    """Rescale an SPD matrix to unit determinant.

    Returns ``(shape, size)`` with ``shape = S / det(S)**(1/p)`` and
    ``size = det(S)**(1/p)`` so that ``size * shape == S`` up to roundoff.
    """
    S = np.asarray(S, dtype=float)
    p = S.shape[0]
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0 or not np.isfinite(logdet):
        raise DegenerateScatterError("determinant is not positive and finite")
    size = float(np.exp(logdet / p))
    shape = S / size
    return shape, size


def _cholesky_lower(sigma: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, surfacing failure as a typed error."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pivot = float(np.min(np.linalg.eigvalsh(sigma)))
        raise SingularScatterError(
            f"scatter is not positive definite (smallest pivot {pivot:.3e})"
        ) from None


def mahalanobis(X: np.ndarray, est: LocationScatter, use_size: bool = False) -> np.ndarray:
    """Squared Mahalanobis distances of the rows of ``X``.

    Uses one Cholesky factorization of the scatter (``shape`` or
    ``size * shape`` depending on ``use_size``) shared across all rows.
    """
    X = np.asarray(X, dtype=float)
    sigma = est.scatter if use_size else est.shape
    L = _cholesky_lower(sigma)
    Z = solve_triangular(L, (X - est.mu).T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", Z, Z)


def mahalanobis_from(X: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distances for a raw (mu, sigma) pair."""
    X = np.asarray(X, dtype=float)
    L = _cholesky_lower(np.asarray(sigma, dtype=float))
    Z = solve_triangular(L, (X - mu).T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", Z, Z)


def spd_solve(sigma: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``sigma @ Y = B`` for SPD ``sigma``."""
    try:
        c = cho_factor(np.asarray(sigma, dtype=float), lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise SingularScatterError("SPD solve failed: matrix not positive definite") from None
    return cho_solve(c, B, check_finite=False)


def _chi2_cdf(x: np.ndarray, p_dof: float) -> np.ndarray:
    return gammainc(p_dof / 2.0, np.asarray(x) / 2.0)


def _chi2_logpdf(x: float, p_dof: float) -> float:
    a = p_dof / 2.0
    return (a - 1.0) * np.log(x) - x / 2.0 - a * np.log(2.0) - gammaln(a)


def chi2_quantile(p_dof: int, beta: float) -> float:
    """beta-quantile of the chi-square distribution with ``p_dof`` dof.

    Newton iteration on the regularized incomplete gamma function with a
    Wilson-Hilferty starting value, safeguarded by bisection on a bracket.
    Relative accuracy is ~1e-12, well inside the 1e-9 contract.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if p_dof < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {p_dof}")

    z = ndtri(beta)
    h = 2.0 / (9.0 * p_dof)
    q = p_dof * (1.0 - h + z * np.sqrt(h)) ** 3
    if q <= 0:
        q = p_dof * 1e-8

    lo, hi = 0.0, np.inf
    for _ in range(200):
        f = _chi2_cdf(q, p_dof) - beta
        if f > 0:
            hi = min(hi, q)
        else:
            lo = max(lo, q)
        step = f / np.exp(_chi2_logpdf(q, p_dof))
        q_new = q - step
        if not (lo < q_new < hi):
            q_new = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * q
        if abs(q_new - q) <= 1e-13 * q:
            return float(q_new)
        q = q_new
    return float(q)


def chi2_median(p_dof: int) -> float:
    """Median of the chi-square distribution with ``p_dof`` dof."""
    return chi2_quantile(p_dof, 0.5)


def rng_stream(seed: int, stream_id: int) -> Generator:
    """Independent, reproducible substream keyed by (seed, stream_id).

    Philox is counter-based, so substreams are order-independent: the same
    key yields bit-identical draws regardless of how many other streams
    were created or consumed, and regardless of thread count.
    """
    key = np.array([seed & _MASK64, stream_id & _MASK64], dtype=np.uint64)
    return Generator(Philox(key=key))
