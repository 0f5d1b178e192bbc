import numpy as np
import pytest

from robustcov.errors import EstimationError
from robustcov.estimators import (
    EstimatorConfig,
    Family,
    classical_estimate,
    fit,
    mm_estimate,
    reweighted_step,
    rocke_estimate,
    s_estimate,
    size_correct,
    stahel_donoho,
    tau_estimate,
)
from robustcov.linalg import (
    LocationScatter,
    chi2_median,
    mahalanobis,
    normalize_shape,
    rng_stream,
)
from robustcov.rho import bisquare, optimal, weight
from robustcov.scales import breakdown_delta
from robustcov.starts import DirectionSet, StartConfig, direction_stats, ksd_start


def identity_start(p):
    return LocationScatter(np.zeros(p), np.eye(p))


class TestReweightedStep:
    def test_uniform_weights_give_classical(self):
        X = rng_stream(40, 0).standard_normal((30, 3))
        est = reweighted_step(X, identity_start(3), np.ones(30))
        mu = X.mean(axis=0)
        R = X - mu
        shape, _ = normalize_shape(R.T @ R / 30)
        assert np.allclose(est.mu, mu)
        assert np.allclose(est.shape, shape)

    def test_subset_concentration(self):
        X = rng_stream(41, 0).standard_normal((20, 3))
        w = np.zeros(20)
        w[:4] = 1.0
        est = reweighted_step(X, identity_start(3), w)
        pts = X[:4]
        mu = pts.mean(axis=0)
        R = pts - mu
        shape, _ = normalize_shape(R.T @ R / 4)
        assert np.allclose(est.mu, mu)
        assert np.allclose(est.shape, shape)

    def test_fixed_point_idempotence(self):
        X = rng_stream(42, 0).standard_normal((80, 4))
        start, _ = ksd_start(X, StartConfig(seed=1))
        res = s_estimate(X, EstimatorConfig(family=Family.S, rho=bisquare(),
                                            tol=1e-12, max_iter=500), start)
        est = res.estimate
        d = mahalanobis(X, est)
        w = weight(bisquare(), d / res.scale)
        nxt = reweighted_step(X, est, w)
        assert np.linalg.norm(nxt.mu - est.mu) < 1e-8

    def test_bad_weights(self):
        X = rng_stream(43, 0).standard_normal((10, 2))
        with pytest.raises(EstimationError):
            reweighted_step(X, identity_start(2), np.zeros(10))
        with pytest.raises(ValueError):
            reweighted_step(X, identity_start(2), -np.ones(10))


class TestSEstimate:
    def test_scale_equation_residual(self):
        X = rng_stream(44, 0).standard_normal((60, 4))
        start, _ = ksd_start(X, StartConfig(seed=1))
        res = s_estimate(X, EstimatorConfig(family=Family.S, rho=bisquare()), start)
        assert abs(res.metadata["scale_residual"]) <= 1e-10

    def test_objective_monotone(self):
        X = rng_stream(45, 0).standard_normal((50, 3))
        X[:5] += 6.0
        start, _ = ksd_start(X, StartConfig(seed=2))
        res = s_estimate(X, EstimatorConfig(family=Family.S, rho=bisquare()), start)
        objs = res.metadata["objectives"]
        assert all(a > b for a, b in zip(objs, objs[1:]))

    def test_duplicate_rows_equivalence(self):
        rng = rng_stream(46, 0)
        Y = rng.standard_normal((25, 3))
        X = np.vstack([Y, Y])
        start = identity_start(3)
        cfg = EstimatorConfig(family=Family.S, rho=bisquare(), delta=0.3,
                              tol=1e-11, max_iter=500)
        r1 = s_estimate(Y, cfg, start)
        r2 = s_estimate(X, cfg, start)
        assert np.allclose(r1.estimate.mu, r2.estimate.mu, atol=1e-6)
        assert np.allclose(r1.estimate.shape, r2.estimate.shape, atol=1e-6)


class TestRockeEstimate:
    def test_positive_weight_safeguard_on_near_collinear_data(self):
        rng = rng_stream(47, 0)
        p, n = 6, 40
        Z = rng.standard_normal((n, 2))
        B = rng.standard_normal((2, p))
        X = Z @ B + 1e-3 * rng.standard_normal((n, p))  # near-collinear
        start = classical_estimate(X)
        res = rocke_estimate(
            X, EstimatorConfig(family=Family.ROCKE, tuning=0.05), start)
        if not res.metadata["rocke_fallback"]:
            assert res.metadata["first_iter_positive_weights"] >= 2 * p

    def test_scale_equation_residual_gamma_one(self):
        from robustcov.rho import rocke_biflat
        X = rng_stream(48, 0).standard_normal((80, 4))
        start, _ = ksd_start(X, StartConfig(seed=1))
        cfg = EstimatorConfig(family=Family.ROCKE, rho=rocke_biflat(gamma=1.0))
        res = rocke_estimate(X, cfg, start)
        assert not res.metadata["rocke_fallback"]
        assert abs(res.metadata["scale_residual"]) <= 1e-8

    def test_gamma_ladder_reaches_target(self):
        from robustcov.rho import rocke_gamma
        p = 20
        X = rng_stream(49, 0).standard_normal((200, p))
        start, _ = ksd_start(X, StartConfig(seed=1))
        alpha = 0.008
        res = rocke_estimate(X, EstimatorConfig(family=Family.ROCKE, tuning=alpha), start)
        assert res.metadata["gamma"] == pytest.approx(rocke_gamma(p, alpha))
        assert res.metadata["gamma_ladder"][-1] == pytest.approx(rocke_gamma(p, alpha))


class TestMMEstimate:
    def test_large_c_recovers_classical_shape(self):
        X = rng_stream(50, 0).standard_normal((60, 3))
        start, _ = ksd_start(X, StartConfig(seed=1))
        cfg = EstimatorConfig(family=Family.MM, rho=optimal(), tuning=1e9,
                              tol=1e-12, max_iter=500)
        res = mm_estimate(X, cfg, start)
        cls = classical_estimate(X)
        assert np.allclose(res.estimate.shape, cls.shape, atol=1e-5)
        assert np.allclose(res.estimate.mu, cls.mu, atol=1e-5)

    def test_objective_never_exceeds_start(self):
        rng = rng_stream(51, 0)
        for i in range(20):
            X = rng.standard_normal((40, 3))
            X[:6, 0] += rng.uniform(2, 12)
            start, _ = ksd_start(X, StartConfig(seed=i), rng=rng_stream(51, 100 + i))
            cfg = EstimatorConfig(family=Family.MM, rho=optimal(), tuning=1.0)
            res = mm_estimate(X, cfg, start)
            assert res.objective <= res.metadata["objective_start"] + 1e-12
            objs = res.metadata["objectives"]
            assert all(a > b for a, b in zip(objs, objs[1:]))


class TestTauEstimate:
    def test_c_one_matches_s_estimator(self):
        X = rng_stream(52, 0).standard_normal((50, 3))
        start, _ = ksd_start(X, StartConfig(seed=1))
        delta = breakdown_delta(*X.shape[::-1]) if False else breakdown_delta(50, 3)
        kw = dict(delta=delta, tol=1e-11, max_iter=500)
        rs = s_estimate(X, EstimatorConfig(family=Family.S, rho=bisquare(), **kw), start)
        rt = tau_estimate(X, EstimatorConfig(family=Family.TAU, rho=bisquare(),
                                             tuning=1.0, **kw), start)
        assert np.allclose(rt.estimate.mu, rs.estimate.mu, atol=1e-4)
        assert np.allclose(rt.estimate.shape, rs.estimate.shape, atol=1e-4)

    def test_tau_scale_monotone(self):
        X = rng_stream(53, 0).standard_normal((60, 4))
        X[:9, 1] -= 7.0
        start, _ = ksd_start(X, StartConfig(seed=2))
        res = tau_estimate(X, EstimatorConfig(family=Family.TAU, rho=optimal(),
                                              tuning=1.1), start)
        objs = res.metadata["objectives"]
        assert all(a > b for a, b in zip(objs, objs[1:]))


class TestStahelDonoho:
    def test_mass_point_full_weight(self):
        # 20 identical points plus a symmetric 21-point cloud: along every
        # direction the mass value carries the median (between 10 and 11
        # cloud points on each side) while the MAD stays positive
        p = 3
        a = np.array([1.0, 2.0, 3.0])
        Z = rng_stream(54, 0).standard_normal((10, p))
        X = np.vstack([np.tile(a, (20, 1)), a + Z, a - Z,
                       a + rng_stream(54, 2).standard_normal(p)])
        dirs = np.vstack([np.eye(p), rng_stream(54, 1).standard_normal((5, p))])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        dset = direction_stats(X, dirs)
        from robustcov.starts import outlyingness
        r = outlyingness(X, dset)
        assert np.allclose(r[:20], 0.0)
        w_mass = weight(optimal(), r[:20] / 2.0)
        assert np.allclose(w_mass, 1.0)

    def test_cutoff_at_nine_c(self):
        assert weight(optimal(), 9.0) == pytest.approx(0.0, abs=1e-12)
        X = rng_stream(55, 0).standard_normal((50, 3))
        X[0] = 1e3  # far point: r >= 9c, hence exactly zero weight
        start, dset = ksd_start(X, StartConfig(seed=1))
        res = stahel_donoho(X, dset, c=1.0)
        assert res.metadata["positive_weights"] < 50

    def test_all_weights_zero_error(self):
        X = rng_stream(56, 0).standard_normal((30, 3))
        dset = ksd_start(X, StartConfig(seed=1))[1]
        with pytest.raises(EstimationError, match="increase"):
            stahel_donoho(X, dset, c=1e-9)


class TestSizeCorrect:
    def test_matched_median_gives_unit_size(self):
        rng = rng_stream(57, 0)
        X = rng.standard_normal((200, 4))
        est0 = LocationScatter(np.zeros(4), np.eye(4))
        d = mahalanobis(X, est0)
        X = X * np.sqrt(chi2_median(4) / np.median(d))
        est = size_correct(X, est0)
        assert est.size == pytest.approx(1.0, rel=1e-12)

    def test_quadratic_scaling(self):
        X = rng_stream(58, 0).standard_normal((100, 3))
        est0 = LocationScatter(np.zeros(3), np.eye(3))
        s1 = size_correct(X, est0).size
        s2 = size_correct(3.0 * X, est0).size
        assert s2 == pytest.approx(9.0 * s1, rel=1e-12)

    def test_clean_normal_near_one(self):
        X = rng_stream(59, 0).standard_normal((1000, 5))
        est = size_correct(X, LocationScatter(np.zeros(5), np.eye(5)))
        assert est.size == pytest.approx(1.0, abs=0.1)


class TestEquivariance:
    @pytest.mark.parametrize("p", [3, 5])
    def test_all_families(self, p):
        rng = rng_stream(60, p)
        n = 20 * p
        X = rng.standard_normal((n, p))
        X[: n // 10, 0] += 5.0
        A = rng.standard_normal((p, p)) + 3 * np.eye(p)
        b = rng.standard_normal(p)
        Y = X @ A.T + b

        start, dset = ksd_start(X, StartConfig(seed=7))
        startY = LocationScatter(A @ start.mu + b,
                                 normalize_shape(A @ start.shape @ A.T)[0])
        dirsY = np.linalg.solve(A.T, dset.dirs.T).T
        dirsY /= np.linalg.norm(dirsY, axis=1, keepdims=True)
        dsetY = direction_stats(Y, dirsY)

        kw = dict(tol=1e-11, max_iter=1000)
        cases = [
            EstimatorConfig(family=Family.S, rho=bisquare(), **kw),
            EstimatorConfig(family=Family.ROCKE, tuning=0.05, **kw),
            EstimatorConfig(family=Family.MM, rho=optimal(), tuning=1.0, **kw),
            EstimatorConfig(family=Family.TAU, rho=optimal(), tuning=1.0, **kw),
        ]
        for cfg in cases:
            rX = fit(X, cfg, start=start)
            rY = fit(Y, cfg, start=startY)
            muY = A @ rX.estimate.mu + b
            SY = A @ rX.estimate.scatter @ A.T
            assert np.linalg.norm(rY.estimate.mu - muY) <= 1e-5 * (1 + np.linalg.norm(muY))
            assert (np.linalg.norm(rY.estimate.scatter - SY)
                    <= 1e-5 * np.linalg.norm(SY))
        rX = stahel_donoho(X, dset, 4.0)
        rY = stahel_donoho(Y, dsetY, 4.0)
        muY = A @ rX.estimate.mu + b
        SY = A @ rX.estimate.scatter @ A.T
        assert np.linalg.norm(rY.estimate.mu - muY) <= 1e-5 * (1 + np.linalg.norm(muY))
        assert np.linalg.norm(rY.estimate.scatter - SY) <= 1e-5 * np.linalg.norm(SY)


class TestPermutationInvariance:
    def test_row_order_irrelevant_given_start(self):
        X = rng_stream(61, 0).standard_normal((50, 3))
        perm = rng_stream(61, 1).permutation(50)
        start = identity_start(3)
        for cfg in (EstimatorConfig(family=Family.S, rho=bisquare()),
                    EstimatorConfig(family=Family.MM, rho=optimal(), tuning=1.0)):
            r1 = fit(X, cfg, start=start)
            r2 = fit(X[perm], cfg, start=start)
            assert np.allclose(r1.estimate.mu, r2.estimate.mu, atol=1e-12)
            assert np.allclose(r1.estimate.scatter, r2.estimate.scatter, atol=1e-12)


class TestFitDispatcher:
    def test_classical(self):
        X = rng_stream(62, 0).standard_normal((40, 3))
        res = fit(X, EstimatorConfig(family=Family.CLASSICAL))
        cls = classical_estimate(X)
        assert np.allclose(res.estimate.scatter, cls.scatter)

    def test_tuning_resolution_from_tables(self):
        X = rng_stream(63, 0).standard_normal((100, 10))
        res = fit(X, EstimatorConfig(family=Family.MM, rho=optimal(), start="ksd"), seed=3)
        assert res.metadata["c"] == pytest.approx(0.9512)

    def test_subsampling_directions_route(self):
        X = rng_stream(64, 0).standard_normal((60, 3))
        cfg = EstimatorConfig(family=Family.STAHEL_DONOHO, rho=optimal(),
                              start="subsampling")
        res = fit(X, cfg, seed=5)
        assert res.converged
