"""Iteratively reweighted estimators of multivariate location and scatter.

All five families (S, Rocke, MM, tau, Stahel-Donoho) share the same
machinery: compute squared Mahalanobis distances, turn them into weights,
take a weighted mean and covariance, project the covariance onto the
det-1 shape manifold, and accept the step only if the family's objective
decreased (with step-halving toward the previous iterate otherwise). The
descent guard is what makes the non-monotonic Rocke weight safe and gives
every family a nonincreasing objective sequence.

Scatter sizes are calibrated at the end by matching the median squared
distance to the chi-square median.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from .errors import (
    DegenerateScaleError,
    DegenerateScatterError,
    EstimationError,
    ScaleConvergenceError,
    SingularScatterError,
)
from .linalg import (
    LocationScatter,
    chi2_median,
    chi2_quantile,
    mahalanobis,
    mahalanobis_from,
    normalize_shape,
    rng_stream,
    validate_data,
)
from .rho import RhoFamily, RhoSpec, bisquare, optimal, rho, rho_prime, rocke_biflat, weight
from .scales import MScaleParams, breakdown_delta, median_scale, mscale, tau_scale
from .starts import DirectionSet, StartConfig, ksd_start, mve_start, outlyingness, subsampling_directions


class Family(str, Enum):
    S = "s"
    ROCKE = "rocke"
    MM = "mm"
    TAU = "tau"
    STAHEL_DONOHO = "stahel-donoho"
    CLASSICAL = "classical"


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimator to run and how it is tuned.

    ``tuning`` is the constant c (MM, tau, Stahel-Donoho) or alpha (Rocke);
    ``None`` defers to the closed-form approximations in :mod:`.tuning`.
    ``delta`` defaults to the maximum-breakdown value 0.5 (1 - p/n).
    """

    family: Family = Family.MM
    rho: RhoSpec = field(default_factory=optimal)
    tuning: float | None = None
    delta: float | None = None
    max_iter: int = 200
    tol: float = 1e-7
    start: str = "ksd"  # "mve" | "ksd" | "user" | "subsampling" (S-D only)


@dataclass
class IrlsState:
    """One iterate of the reweighting loop."""

    mu: np.ndarray
    shape: np.ndarray
    distances: np.ndarray
    scale: float
    objective: float
    iteration: int


@dataclass
class FitResult:
    """A fitted estimate plus convergence diagnostics."""

    estimate: LocationScatter
    scale: float | None
    objective: float
    iterations: int
    converged: bool
    metadata: dict = field(default_factory=dict)


def classical_estimate(X: np.ndarray) -> LocationScatter:
    """Sample mean and covariance (divisor n - 1), as a LocationScatter."""
    X = validate_data(X)
    mu = X.mean(axis=0)
    R = X - mu
    C = R.T @ R / (X.shape[0] - 1)
    return LocationScatter.from_scatter(mu, C)


def _weighted_moments(X: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and det-1-normalized weighted covariance shape."""
    wsum = w.sum()
    if not wsum > 0:
        raise EstimationError("all weights are zero")
    mu = (w @ X) / wsum
    R = X - mu
    C = (R * w[:, None]).T @ R / wsum
    try:
        shape, _ = normalize_shape(C)
    except DegenerateScatterError as exc:
        raise SingularScatterError(f"weighted covariance is singular: {exc}") from None
    return mu, shape


def reweighted_step(X: np.ndarray, est: LocationScatter, weights: np.ndarray) -> LocationScatter:
    """One weighted mean/covariance update, projected to a det-1 shape.

    The generic fixed-point kernel shared by every family. ``est`` is the
    iterate the caller derived ``weights`` from; the update itself depends
    on it only through those weights.
    """
    X = np.asarray(X, dtype=float)
    w = np.asarray(weights, dtype=float)
    if w.shape != (X.shape[0],):
        raise ValueError(f"weights must have shape ({X.shape[0]},), got {w.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    mu, shape = _weighted_moments(X, w)
    return LocationScatter(mu=mu, shape=shape, size=1.0)


def size_correct(X: np.ndarray, est: LocationScatter) -> LocationScatter:
    """Set the scatter size so the median squared distance matches chi-square.

    size = median(d(mu, shape)) / median(chi2_p).
    """
    d = mahalanobis(np.asarray(X, dtype=float), est, use_size=False)
    med = median_scale(d)
    if not med > 0:
        raise DegenerateScatterError("zero median distance; cannot calibrate size")
    return LocationScatter(mu=est.mu, shape=est.shape, size=med / chi2_median(est.p))


_MAX_HALVINGS = 10


def _descent_irls(
    X: np.ndarray,
    mu: np.ndarray,
    shape: np.ndarray,
    evaluate: Callable[[np.ndarray], tuple[float, float]],
    weights_of: Callable[[np.ndarray, float], np.ndarray],
    tol: float,
    max_iter: int,
) -> tuple[IrlsState, bool, list[float]]:
    """Descent-guarded IRLS over det-1 shapes.

    ``evaluate(d) -> (objective, aux)`` scores a distance vector;
    ``weights_of(d, aux)`` produces the reweighting vector. A candidate
    step is accepted only if the objective strictly decreases; otherwise
    the candidate is blended toward the previous iterate with weight
    2**-k, k <= 10, before giving up.
    """
    d = mahalanobis_from(X, mu, shape)
    obj, aux = evaluate(d)
    state = IrlsState(mu=mu, shape=shape, distances=d, scale=aux, objective=obj, iteration=0)
    trace = [obj]
    converged = False
    for it in range(1, max_iter + 1):
        w = weights_of(state.distances, state.scale)
        try:
            mu_c, shape_c = _weighted_moments(X, w)
        except (EstimationError, SingularScatterError):
            break
        accepted = None
        for k in range(_MAX_HALVINGS + 1):
            h = 0.5 ** k
            mu_h = state.mu + h * (mu_c - state.mu)
            try:
                shape_h, _ = normalize_shape((1.0 - h) * state.shape + h * shape_c)
                d_h = mahalanobis_from(X, mu_h, shape_h)
                obj_h, aux_h = evaluate(d_h)
            except (DegenerateScatterError, SingularScatterError, DegenerateScaleError,
                    ScaleConvergenceError):
                continue
            if obj_h < state.objective:
                accepted = (mu_h, shape_h, d_h, obj_h, aux_h)
                break
        if accepted is None:
            break
        mu_h, shape_h, d_h, obj_h, aux_h = accepted
        rel_drop = (state.objective - obj_h) / max(abs(state.objective), np.finfo(float).tiny)
        mu_move = float(np.linalg.norm(mu_h - state.mu))
        state = IrlsState(mu=mu_h, shape=shape_h, distances=d_h, scale=aux_h,
                          objective=obj_h, iteration=it)
        trace.append(obj_h)
        if rel_drop <= tol and mu_move <= tol * (1.0 + float(np.linalg.norm(state.mu))):
            converged = True
            break
    return state, converged, trace


def _resolve_delta(cfg: EstimatorConfig, n: int, p: int) -> float:
    return cfg.delta if cfg.delta is not None else breakdown_delta(n, p)


def s_estimate(X: np.ndarray, cfg: EstimatorConfig, start: LocationScatter) -> FitResult:
    """S-estimator: minimize the M-scale of squared distances over det-1 shapes."""
    X = validate_data(X)
    n, p = X.shape
    delta = _resolve_delta(cfg, n, p)
    params = MScaleParams(delta=delta, rho=cfg.rho)

    def evaluate(d):
        s = mscale(d, params)
        return s, s

    def weights_of(d, s):
        return weight(cfg.rho, d / s)

    state, converged, trace = _descent_irls(
        X, start.mu, start.shape, evaluate, weights_of, cfg.tol, cfg.max_iter
    )
    est = size_correct(X, LocationScatter(state.mu, state.shape))
    residual = float(np.mean(rho(cfg.rho, state.distances / state.scale))) - delta
    return FitResult(
        estimate=est,
        scale=state.scale,
        objective=state.objective,
        iterations=state.iteration,
        converged=converged,
        metadata={"delta": delta, "objectives": trace, "scale_residual": residual},
    )


_ROCKE_LADDER_START = 0.15
_ROCKE_LADDER_STEPS = 4


def _rocke_band_safeguard(d0: np.ndarray, spec: RhoSpec, delta: float,
                          p: int) -> tuple[RhoSpec, float, int, int]:
    """Enlarge gamma (factor 1.5, capped at 1) until at least 2p points
    carry positive weight at the first iteration. Returns the adjusted
    spec, its M-scale on d0, the positive-weight count, and the number of
    enlargements."""
    spec_now = spec
    s_now = mscale(d0, MScaleParams(delta=delta, rho=spec_now))
    npos = int(np.count_nonzero(weight(spec_now, d0 / s_now) > 0.0))
    enlargements = 0
    while npos < 2 * p and spec_now.gamma < 1.0:
        spec_now = replace(spec_now, gamma=min(1.0, 1.5 * spec_now.gamma))
        s_now = mscale(d0, MScaleParams(delta=delta, rho=spec_now))
        npos = int(np.count_nonzero(weight(spec_now, d0 / s_now) > 0.0))
        enlargements += 1
    return spec_now, s_now, npos, enlargements


def rocke_estimate(X: np.ndarray, cfg: EstimatorConfig, start: LocationScatter) -> FitResult:
    """S-estimation with the Rocke biflat band weight.

    Distances are standardized as t = d/S before entering the band weight,
    with S the current Rocke M-scale; delta defaults to 0.5, which centers
    the band on the bulk (rho(1) = 1/2, so the M-scale equation pins the
    median standardized distance at the band center).

    The target band half-width gamma comes from alpha via the chi-square
    rule. Wide bands reject weakly, so the minimization is run as a
    continuation: starting from a tight band (gamma 0.15), whose strong
    rejection peels clustered outliers the target band would accommodate,
    and re-converging while the band is widened geometrically to the
    target. At every rung, if fewer than 2p points carry positive weight
    at the first iteration, gamma is enlarged by factors of 1.5 (capped at
    1); if the cap still leaves fewer than 2p, the bisquare S-estimator is
    run instead and the fallback is flagged in the metadata.
    """
    X = validate_data(X)
    n, p = X.shape
    delta = cfg.delta if cfg.delta is not None else 0.5
    if cfg.rho.family is RhoFamily.ROCKE_BIFLAT:
        spec = cfg.rho
    else:
        if cfg.tuning is None:
            raise ValueError("rocke_estimate needs alpha (cfg.tuning) or a rocke-biflat rho")
        spec = rocke_biflat(p=p, alpha=cfg.tuning)

    gamma_target = spec.gamma
    if gamma_target > _ROCKE_LADDER_START:
        ladder = list(np.geomspace(_ROCKE_LADDER_START, gamma_target, _ROCKE_LADDER_STEPS))
    else:
        ladder = [gamma_target]

    mu_cur, shape_cur = start.mu, start.shape
    first_npos = None
    enlarge_total = 0
    state = converged = trace = None
    spec_now = spec
    for gamma_rung in ladder:
        spec_rung = replace(spec, gamma=float(gamma_rung))
        d0 = mahalanobis_from(X, mu_cur, shape_cur)
        spec_now, _, npos, enlargements = _rocke_band_safeguard(d0, spec_rung, delta, p)
        enlarge_total += enlargements
        if first_npos is None:
            first_npos = npos
        if npos < 2 * p:
            fallback_cfg = replace(cfg, rho=bisquare(), tuning=None, delta=delta)
            res = s_estimate(X, fallback_cfg, start)
            res.metadata.update(
                {"rocke_fallback": True, "gamma": spec_now.gamma,
                 "first_iter_positive_weights": first_npos}
            )
            return res

        params = MScaleParams(delta=delta, rho=spec_now)

        def evaluate(d):
            s = mscale(d, params)
            return s, s

        def weights_of(d, s, _spec=spec_now):
            return weight(_spec, d / s)

        state, converged, trace = _descent_irls(
            X, mu_cur, shape_cur, evaluate, weights_of, cfg.tol, cfg.max_iter
        )
        mu_cur, shape_cur = state.mu, state.shape

    est = size_correct(X, LocationScatter(state.mu, state.shape))
    residual = float(np.mean(rho(spec_now, state.distances / state.scale))) - delta
    return FitResult(
        estimate=est,
        scale=state.scale,
        objective=state.objective,
        iterations=state.iteration,
        converged=converged,
        metadata={
            "delta": delta,
            "gamma": spec_now.gamma,
            "gamma_ladder": [float(g) for g in ladder],
            "gamma_enlargements": enlarge_total,
            "first_iter_positive_weights": first_npos,
            "rocke_fallback": False,
            "objectives": trace,
            "scale_residual": residual,
        },
    )


def mm_estimate(X: np.ndarray, cfg: EstimatorConfig, start: LocationScatter) -> FitResult:
    """MM-estimator: minimize mean rho(d/(cS)) with S fixed from the start.

    S is the M-scale of the start's squared distances; any returned
    solution has objective <= the start's objective (the start itself is
    returned, size-corrected and flagged, if no step improves on it).
    """
    X = validate_data(X)
    n, p = X.shape
    delta = _resolve_delta(cfg, n, p)
    if cfg.tuning is None:
        raise ValueError("mm_estimate needs the tuning constant c (cfg.tuning)")
    c = float(cfg.tuning)

    d0 = mahalanobis(X, LocationScatter(start.mu, start.shape))
    s_fixed = mscale(d0, MScaleParams(delta=delta, rho=cfg.rho))
    divisor = c * s_fixed

    def evaluate(d):
        return float(np.mean(rho(cfg.rho, d / divisor))), divisor

    def weights_of(d, _aux):
        return weight(cfg.rho, d / divisor)

    state, converged, trace = _descent_irls(
        X, start.mu, start.shape, evaluate, weights_of, cfg.tol, cfg.max_iter
    )
    improved = state.iteration > 0
    est = size_correct(X, LocationScatter(state.mu, state.shape))
    return FitResult(
        estimate=est,
        scale=s_fixed,
        objective=state.objective,
        iterations=state.iteration,
        converged=converged,
        metadata={
            "delta": delta,
            "c": c,
            "objective_start": trace[0],
            "objective_final": state.objective,
            "improved_on_start": improved,
            "objectives": trace,
        },
    )


def tau_estimate(X: np.ndarray, cfg: EstimatorConfig, start: LocationScatter) -> FitResult:
    """tau-estimator: minimize sigma0 * mean rho2(d/sigma0), rho2 = rho1(./c).

    The IRLS weights come from the stationarity of the tau-scale:
    w_i = c_A W1(t_i) + W2(t_i) with t_i = d_i/sigma0 and
    c_A = (sum rho2(t) - sum t W2(t)) / (sum t W1(t)), W_j the exact
    derivatives of rho_j. A nonpositive c_A falls back to plain W2 weights;
    the descent guard keeps every accepted step a true tau-scale decrease.
    """
    X = validate_data(X)
    n, p = X.shape
    delta = _resolve_delta(cfg, n, p)
    if cfg.tuning is None:
        raise ValueError("tau_estimate needs the tuning constant c (cfg.tuning)")
    c = float(cfg.tuning)
    rho1 = cfg.rho
    from .rho import scaled as _scaled

    rho2 = _scaled(rho1, c)

    def evaluate(d):
        sigma0, sigma = tau_scale(d, rho1, c, delta)
        return sigma, sigma0

    def weights_of(d, sigma0):
        t = d / sigma0
        w1 = rho_prime(rho1, t)
        w2 = rho_prime(rho2, t)
        den = float(np.sum(t * w1))
        num = float(np.sum(rho(rho2, t)) - np.sum(t * w2))
        if den > 0 and num > 0:
            return (num / den) * w1 + w2
        return w2

    state, converged, trace = _descent_irls(
        X, start.mu, start.shape, evaluate, weights_of, cfg.tol, cfg.max_iter
    )
    est = size_correct(X, LocationScatter(state.mu, state.shape))
    return FitResult(
        estimate=est,
        scale=state.scale,
        objective=state.objective,
        iterations=state.iteration,
        converged=converged,
        metadata={"delta": delta, "c": c, "objectives": trace},
    )


def stahel_donoho(X: np.ndarray, dirs: DirectionSet, c: float) -> FitResult:
    """Stahel-Donoho: weighted mean/cov with weights W_opt(r/c) of the
    projection outlyingness r (cutoff at r = 9c)."""
    X = validate_data(X)
    if dirs.dirs.shape[0] == 0:
        raise EstimationError("empty direction set")
    if c <= 0:
        raise ValueError(f"c must be positive, got {c}")
    r = outlyingness(X, dirs)
    w = weight(optimal(), r / c)
    if not w.sum() > 0:
        raise EstimationError(
            "all Stahel-Donoho weights are zero; increase the tuning constant c"
        )
    mu, shape = _weighted_moments(X, w)
    est = size_correct(X, LocationScatter(mu=mu, shape=shape))
    return FitResult(
        estimate=est,
        scale=None,
        objective=float("nan"),
        iterations=1,
        converged=True,
        metadata={"c": c, "positive_weights": int(np.count_nonzero(w > 0))},
    )


def _resolve_tuning(cfg: EstimatorConfig, n: int, p: int) -> float | None:
    if cfg.tuning is not None or cfg.family in (Family.S, Family.CLASSICAL):
        return cfg.tuning
    from .tuning import approx_constant

    start = cfg.start if cfg.start in ("mve", "ksd", "subsampling") else "ksd"
    return approx_constant(cfg.family.value, start, cfg.rho.family.value, p, n)


def fit(
    X: np.ndarray,
    cfg: EstimatorConfig,
    start: LocationScatter | None = None,
    directions: DirectionSet | None = None,
    seed: int = 0,
    start_config: StartConfig | None = None,
) -> FitResult:
    """Run the configured estimator end to end.

    Computes the requested starting estimator (MVE or KSD) unless an
    explicit ``start`` (and, for Stahel-Donoho, ``directions``) is given.
    The tuning constant defaults to the closed-form approximation for the
    (family, start, rho) combination.
    """
    X = validate_data(X)
    n, p = X.shape

    if cfg.family is Family.CLASSICAL:
        est = classical_estimate(X)
        return FitResult(estimate=est, scale=None, objective=float("nan"),
                         iterations=0, converged=True, metadata={})

    scfg = start_config if start_config is not None else StartConfig(seed=seed)

    if cfg.family is Family.STAHEL_DONOHO:
        if directions is None:
            if cfg.start == "subsampling":
                directions = subsampling_directions(X, rng=rng_stream(scfg.seed, 1))
            else:
                _, directions = ksd_start(X, scfg)
        c = _resolve_tuning(cfg, n, p)
        return stahel_donoho(X, directions, c)

    if start is None:
        if cfg.start == "mve":
            start = mve_start(X, scfg)
        elif cfg.start == "ksd":
            start, _ = ksd_start(X, scfg)
        else:
            raise ValueError(f"no start supplied and start kind is {cfg.start!r}")

    tuning = _resolve_tuning(cfg, n, p)
    cfg_t = replace(cfg, tuning=tuning)
    if cfg.family is Family.S:
        return s_estimate(X, cfg_t, start)
    if cfg.family is Family.ROCKE:
        return rocke_estimate(X, cfg_t, start)
    if cfg.family is Family.MM:
        return mm_estimate(X, cfg_t, start)
    if cfg.family is Family.TAU:
        return tau_estimate(X, cfg_t, start)
    raise ValueError(f"unknown family {cfg.family}")
