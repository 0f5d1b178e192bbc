"""Robust starting estimators: subsampled MVE and the kurtosis-based KSD.

The KSD procedure combines two direction sources. The deterministic one
finds the p directions maximizing and the p directions minimizing the
kurtosis of the projected sample (with deflation between finds); the
random one draws "specific" directions as normalized differences of two
sample points, one from each half of the norm ranking, which point
straight at clustered outliers even where the kurtosis signal vanishes
(a point mass carrying ~20% of the sample leaves projection kurtosis
near the normal value, the procedure's known blind spot). Observations
whose projection outlyingness exceeds a dimension-dependent cutoff are
hard-rejected, the mean/covariance of the retained points replace the
classical ones, and the whole detection is repeated on the retained set
for a few passes, accumulating directions; partial detection in one pass
re-exposes the remaining outliers in the next. The final direction set is
returned for reuse by the Stahel-Donoho estimator.

Kurtosis searching happens in the sphered sample (centered, whitened by
the Cholesky factor of the current covariance); those directions map back
contravariantly (u = L^-T v, normalized), so their outlyingness values
are invariant under affine transformations of the data: the sphered
sample of AX + b equals that of X up to an orthogonal map, and every
quantity the search path depends on (norms, inner products, kurtosis
values) is preserved by orthogonal maps. The point-difference directions
instead transform covariantly, trading exact invariance for detection
power; matched-seed runs keep the same pairs, so transformed data yield
correspondingly transformed directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from numpy.random import Generator
from scipy.linalg import solve_triangular

from .errors import StartFailureError
from .linalg import (
    LocationScatter,
    chi2_median,
    chi2_quantile,
    mahalanobis_from,
    normalize_shape,
    rng_stream,
    validate_data,
)
from .scales import median_scale

_MAD_NORMAL = 0.6745  # MAD of a standard normal; makes spreads consistent


@dataclass(frozen=True)
class StartConfig:
    """Knobs for the starting estimators.

    ``ksd_specific_directions=None`` means the default max(p, 20) per pass.
    ``ksd_cutoff_beta`` is the chi-square level feeding the hard-rejection
    cutoff (see :func:`ksd_start`); ``ksd_passes`` bounds the
    detect/refit iterations. ``mve_subsamples=None`` enumerates all
    (p+1)-subsets instead of sampling them.
    """

    mve_subsamples: int | None = 1000
    ksd_specific_directions: int | None = None
    ksd_cutoff_beta: float = 0.99
    ksd_passes: int = 3
    seed: int = 0
    kurtosis_restarts: int = 3
    kurtosis_tol: float = 1e-8
    kurtosis_max_iter: int = 200

    def __post_init__(self):
        if self.mve_subsamples is not None and self.mve_subsamples < 1:
            raise ValueError("mve_subsamples must be >= 1")
        if not 0.0 < self.ksd_cutoff_beta < 1.0:
            raise ValueError("ksd_cutoff_beta must lie in (0, 1)")
        if self.ksd_passes < 1:
            raise ValueError("ksd_passes must be >= 1")


@dataclass
class DirectionSet:
    """Unit projection directions with robust per-direction centers/spreads.

    ``spreads`` are MAD/0.6745 of the projections; directions whose MAD is
    zero are dropped and counted in ``dropped``. When the set comes out of
    the KSD detection, ``retained`` records how many points survived the
    final hard-rejection cutoff.
    """

    dirs: np.ndarray      # (k, p), unit rows
    centers: np.ndarray   # (k,) medians of projections
    spreads: np.ndarray   # (k,) normalized MADs, all > 0
    dropped: int = 0
    retained: int | None = None

    def __len__(self) -> int:
        return self.dirs.shape[0]


def direction_stats(X: np.ndarray, dirs: np.ndarray) -> DirectionSet:
    """Attach median/MAD projection statistics to unit directions."""
    Z = X @ dirs.T
    centers = np.median(Z, axis=0)
    spreads = np.median(np.abs(Z - centers), axis=0) / _MAD_NORMAL
    keep = spreads > 0.0
    return DirectionSet(
        dirs=dirs[keep],
        centers=centers[keep],
        spreads=spreads[keep],
        dropped=int(np.count_nonzero(~keep)),
    )


def outlyingness(X: np.ndarray, dset: DirectionSet) -> np.ndarray:
    """max over directions of |u'x - median| / spread, per row of X."""
    Z = np.asarray(X, dtype=float) @ dset.dirs.T
    return np.max(np.abs(Z - dset.centers) / dset.spreads, axis=1)


def _sphere(X: np.ndarray, mu: np.ndarray | None = None,
            C: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and whiten: returns (mean, lower Cholesky L of cov, X_sphered).

    With the default MLE moments of ``X`` itself the sphered sample has
    exactly zero column means and identity second-moment matrix.
    """
    if mu is None:
        mu = X.mean(axis=0)
    R = X - mu
    if C is None:
        C = R.T @ R / X.shape[0]
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise StartFailureError("sample covariance is singular; cannot sphere") from None
    Xs = solve_triangular(L, R.T, lower=True, check_finite=False).T
    return mu, L, Xs


def _unsphere_directions(L: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Map sphered-space directions to unit data-space directions (L^-T v)."""
    W = solve_triangular(L, vs.T, lower=True, trans="T", check_finite=False).T
    return W / np.linalg.norm(W, axis=1, keepdims=True)


def _kurtosis(z: np.ndarray) -> float:
    n = z.shape[0]
    z2 = z * z
    m2 = z2.sum() / n
    return float(z2 @ z2) / (n * m2 * m2)


def _ascend_kurtosis(Y: np.ndarray, v0: np.ndarray, sign: float,
                     tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    """Projected gradient ascent (sign=+1) or descent (-1) of the kurtosis
    of Y @ v on the unit sphere, with backtracking line search."""
    n = Y.shape[0]
    v = v0 / np.sqrt(v0 @ v0)
    z = Y @ v
    k = _kurtosis(z)
    eta = None
    stall = 0
    for _ in range(max_iter):
        z2 = z * z
        m2 = float(z2.sum()) / n
        z3 = z2 * z
        m4 = float(z2 @ z2) / n
        yz = Y.T @ np.column_stack((z3, z))
        g = (4.0 / (n * m2 * m2)) * yz[:, 0] - (4.0 * m4 / (n * m2 ** 3)) * yz[:, 1]
        if sign < 0:
            g = -g
        g -= (g @ v) * v
        gn = float(np.sqrt(g @ g))
        if gn < 1e-14:
            break
        if eta is None:
            eta = 1.0 / (1.0 + gn)
        v_new = None
        for _ in range(40):
            cand = v + eta * g
            cand /= np.sqrt(cand @ cand)
            z_cand = Y @ cand
            k_cand = _kurtosis(z_cand)
            if sign * (k_cand - k) > 0.0:
                v_new = cand
                break
            eta *= 0.5
        if v_new is None:
            break
        dv = v_new - v
        move = float(np.sqrt(dv @ dv))
        stall = stall + 1 if abs(k_cand - k) <= 1e-11 * max(1.0, abs(k)) else 0
        v, z, k = v_new, z_cand, k_cand
        eta *= 2.0
        if move < tol or stall >= 2:
            break
    return v, k


def _restart_vectors(Y: np.ndarray, count: int) -> list[np.ndarray]:
    """Deterministic, equivariant starting points: the rows of Y with the
    largest norms (norms are invariant under orthogonal maps of the
    sphered sample, so matched data yield matched starts)."""
    norms = np.einsum("ij,ij->i", Y, Y)
    order = np.argsort(-norms, kind="stable")
    starts = []
    for idx in order[: 4 * count]:
        row = Y[idx]
        nrm = float(np.sqrt(row @ row))
        if nrm > 1e-12:
            starts.append(row / nrm)
        if len(starts) == count:
            break
    return starts


def _extremal_directions(Xs: np.ndarray, cfg: StartConfig) -> tuple[np.ndarray, int]:
    """p kurtosis maximizers and p minimizers of the sphered sample, found
    by sphere ascent/descent with deflation. Returns (directions in
    sphered coordinates, warning count for degenerate subspaces)."""
    n, p = Xs.shape
    found: list[np.ndarray] = []
    warnings = 0
    for sign in (1.0, -1.0):
        basis = np.eye(p)
        for _ in range(p):
            k = basis.shape[1]
            Y = Xs @ basis
            if k == 1:
                found.append(basis[:, 0])
                break
            if float(np.max(np.einsum("ij,ij->i", Y, Y))) < 1e-18:
                warnings += 1
                break
            best_v, best_k = None, None
            for v0 in _restart_vectors(Y, cfg.kurtosis_restarts):
                v, kv = _ascend_kurtosis(Y, v0, sign, cfg.kurtosis_tol, cfg.kurtosis_max_iter)
                if best_k is None or sign * kv > sign * best_k:
                    best_v, best_k = v, kv
            if best_v is None:
                warnings += 1
                break
            found.append(basis @ best_v)
            # deflate: restrict the basis to the orthogonal complement
            Q, _ = np.linalg.qr(np.column_stack([best_v, np.eye(k)]))
            basis = basis @ Q[:, 1:k]
    return np.array(found), warnings


def _specific_directions(X: np.ndarray, sphered_norms: np.ndarray,
                         count: int, rng: Generator) -> np.ndarray:
    """Random point-difference directions in data coordinates, one endpoint
    from each half of the (sphered) norm ranking. A pair straddling an
    outlier cluster and the bulk points along the cluster's offset."""
    n = X.shape[0]
    order = np.argsort(sphered_norms, kind="stable")
    inner, outer = order[: n // 2], order[n // 2:]
    dirs = []
    for _ in range(count):
        for _attempt in range(16):
            a = outer[rng.integers(len(outer))]
            b = inner[rng.integers(len(inner))]
            diff = X[a] - X[b]
            nrm = np.linalg.norm(diff)
            if nrm > 1e-12:
                dirs.append(diff / nrm)
                break
    return np.array(dirs) if dirs else np.empty((0, X.shape[1]))


def _anchored_directions(X: np.ndarray, count: int) -> np.ndarray:
    """Deterministic directions from the coordinatewise median to the
    ``count`` farthest points (raw Euclidean distance). Raw distances are
    what clustered outliers cannot hide from: sphering absorbs a shifted
    cluster into the covariance, but its offset from the median survives
    in the original coordinates."""
    med = np.median(X, axis=0)
    R = X - med
    nrm = np.sqrt(np.einsum("ij,ij->i", R, R))
    order = np.argsort(-nrm, kind="stable")
    dirs = []
    for idx in order[: 4 * count]:
        if nrm[idx] > 1e-12:
            dirs.append(R[idx] / nrm[idx])
        if len(dirs) == count:
            break
    return np.array(dirs) if dirs else np.empty((0, X.shape[1]))


def _pass_directions(X_active: np.ndarray, mu: np.ndarray, C: np.ndarray,
                     cfg: StartConfig, rng: Generator) -> tuple[np.ndarray, int]:
    """One detection pass: extremal-kurtosis directions of the active rows
    (sphered by the current moments, mapped back contravariantly), raw
    point-difference specific directions, and median-anchored directions
    to the farthest points."""
    p = X_active.shape[1]
    _, L, Xs = _sphere(X_active, mu, C)
    ext, warn = _extremal_directions(Xs, cfg)
    dirs_kurt = _unsphere_directions(L, ext) if ext.shape[0] else np.empty((0, p))
    n_spec = cfg.ksd_specific_directions
    if n_spec is None:
        n_spec = max(p, 20)
    n_pairs = (n_spec + 1) // 2
    n_anchor = n_spec - n_pairs
    norms = np.einsum("ij,ij->i", Xs, Xs)
    pools = [dirs_kurt]
    if n_pairs > 0:
        pools.append(_specific_directions(X_active, norms, n_pairs, rng))
    if n_anchor > 0:
        pools.append(_anchored_directions(X_active, n_anchor))
    pools = [d for d in pools if d.shape[0]]
    if not pools:
        raise StartFailureError("no usable projection directions found")
    return np.vstack(pools), warn


def kurtosis_directions(X: np.ndarray, cfg: StartConfig,
                        rng: Generator | None = None) -> DirectionSet:
    """The single-pass KSD direction set: 2p deterministic extremal-kurtosis
    directions plus random specific directions, with projection medians and
    normalized MADs over the sample."""
    X = validate_data(X)
    n, p = X.shape
    if n < p + 2:
        raise StartFailureError(f"need n >= p+2 for direction search, got n={n}")
    if rng is None:
        rng = rng_stream(cfg.seed, 0)
    dirs, warn = _pass_directions(X, X.mean(axis=0), None, cfg, rng)
    dset = direction_stats(X, dirs)
    dset.dropped += warn
    if len(dset) == 0:
        raise StartFailureError("all projection directions have zero spread")
    return dset


def _rejection_cutoff(ol2: np.ndarray, p: int, beta: float) -> float:
    """Scale-free hard-rejection threshold on squared outlyingness:
    chi2_p(beta) * median(OL^2) / median(chi2_p). Under clean normal data
    OL^2 behaves like a chi-square up to a constant, so the rule flags
    roughly the (1 - beta) tail regardless of the data's scale."""
    return chi2_quantile(p, beta) * float(np.median(ol2)) / chi2_median(p)


def ksd_start(X: np.ndarray, cfg: StartConfig,
              rng: Generator | None = None) -> tuple[LocationScatter, DirectionSet]:
    """KSD estimate: hard-rejection weighted mean/covariance, iterated.

    Each pass computes directions from the currently retained points,
    accumulates them, rejects every point whose squared outlyingness
    exceeds the :func:`_rejection_cutoff`, and refits the retained
    mean/covariance; passes stop when the retained set stabilizes (at most
    ``cfg.ksd_passes``). If fewer than p + 1 points survive a pass, the
    cutoff is relaxed by 50% until enough do (bounded loop). The size is
    calibrated by the chi-square median rule on the full sample.
    """
    X = validate_data(X)
    n, p = X.shape
    if n < p + 2:
        raise StartFailureError(f"need n >= p+2 for the KSD start, got n={n}")
    if rng is None:
        rng = rng_stream(cfg.seed, 0)

    keep = np.ones(n, dtype=bool)
    mu = X.mean(axis=0)
    C = None  # pass 1 spheres with the classical moments
    all_dirs: list[np.ndarray] = []
    dropped = 0
    dset = None
    for pass_no in range(cfg.ksd_passes):
        try:
            dirs, warn = _pass_directions(X[keep], mu, C, cfg, rng)
        except StartFailureError:
            if dset is None:
                raise
            break
        all_dirs.append(dirs)
        dropped += warn
        dset = direction_stats(X, np.vstack(all_dirs))
        dset.dropped += dropped
        if len(dset) == 0:
            raise StartFailureError("all projection directions have zero spread")
        ol2 = outlyingness(X, dset) ** 2
        cutoff = _rejection_cutoff(ol2, p, cfg.ksd_cutoff_beta)
        new_keep = ol2 <= cutoff
        mu_c = C_c = None
        for _ in range(64):
            if int(new_keep.sum()) >= p + 1:
                pts = X[new_keep]
                cand_mu = pts.mean(axis=0)
                R = pts - cand_mu
                cand_C = R.T @ R / pts.shape[0]
                sign, _ = np.linalg.slogdet(cand_C)
                if sign > 0:
                    mu_c, C_c = cand_mu, cand_C
                    break
            cutoff *= 1.5 ** 2
            new_keep = ol2 <= cutoff
        if mu_c is None:
            raise StartFailureError(
                "KSD retained set stays degenerate after relaxing the cutoff"
            )
        stable = bool(np.array_equal(new_keep, keep)) and pass_no > 0
        keep, mu, C = new_keep, mu_c, C_c
        if stable:
            break

    dset.retained = int(keep.sum())
    shape = normalize_shape(C)[0]
    d = mahalanobis_from(X, mu, shape)
    size = median_scale(d) / chi2_median(p)
    return LocationScatter(mu=mu, shape=shape, size=size), dset


def mve_start(X: np.ndarray, cfg: StartConfig,
              rng: Generator | None = None) -> LocationScatter:
    """Approximate minimum-volume-ellipsoid start via (p+1)-subsets.

    Each subset's mean/covariance is det-1 normalized and scored by the
    median squared Mahalanobis distance of the whole sample; the best
    candidate gets one concentration step (refit on the ceil(n/2) smallest
    distances, kept only if the score improves). The returned size matches
    the median distance to the chi-square median.
    """
    X = validate_data(X)
    n, p = X.shape
    if n < p + 2:
        raise StartFailureError(f"need n >= p+2 for MVE subsampling, got n={n}")
    if rng is None:
        rng = rng_stream(cfg.seed, 0)
    if cfg.mve_subsamples is None:
        subsets = combinations(range(n), p + 1)
    else:
        subsets = (rng.choice(n, size=p + 1, replace=False)
                   for _ in range(cfg.mve_subsamples))

    best = None  # (score, mu, shape, d)
    for idx in subsets:
        pts = X[list(idx)]
        mu_c = pts.mean(axis=0)
        R = pts - mu_c
        C = R.T @ R / pts.shape[0]
        sign, _ = np.linalg.slogdet(C)
        if sign <= 0:
            continue
        shape_c = normalize_shape(C)[0]
        try:
            d = mahalanobis_from(X, mu_c, shape_c)
        except Exception:
            continue
        score = median_scale(d)
        if best is None or score < best[0]:
            best = (score, mu_c, shape_c, d)
    if best is None:
        raise StartFailureError("every MVE subsample produced a singular covariance")

    score, mu, shape, d = best
    half = int(np.ceil(n / 2))
    core = np.argpartition(d, half - 1)[:half]
    pts = X[core]
    mu_c = pts.mean(axis=0)
    R = pts - mu_c
    C = R.T @ R / pts.shape[0]
    sign, _ = np.linalg.slogdet(C)
    if sign > 0:
        shape_c = normalize_shape(C)[0]
        try:
            d_c = mahalanobis_from(X, mu_c, shape_c)
            score_c = median_scale(d_c)
            if score_c < score:
                score, mu, shape = score_c, mu_c, shape_c
        except Exception:
            pass

    size = score / chi2_median(p)
    return LocationScatter(mu=mu, shape=shape, size=size)


def subsampling_directions(X: np.ndarray, count: int | None = None,
                           rng: Generator | None = None) -> DirectionSet:
    """Hyperplane normals of random p-point subsets, the classical
    subsampling source for Stahel-Donoho projections (default count 50p)."""
    X = validate_data(X)
    n, p = X.shape
    if rng is None:
        rng = rng_stream(0, 0)
    if count is None:
        count = 50 * p
    dirs = []
    for _ in range(count):
        for _attempt in range(8):
            idx = rng.choice(n, size=p, replace=False)
            pts = X[idx]
            D = (pts[1:] - pts[0]).T  # p x (p-1)
            Q, R = np.linalg.qr(np.column_stack([D, np.zeros((p, 1))]), mode="complete")
            if p > 1 and abs(R[p - 2, p - 2]) < 1e-12:
                continue  # subset nearly affinely dependent; resample
            dirs.append(Q[:, p - 1])
            break
    if not dirs:
        raise StartFailureError("no nondegenerate subsampling directions found")
    dset = direction_stats(X, np.array(dirs))
    if len(dset) == 0:
        raise StartFailureError("all subsampling directions have zero spread")
    return dset
