import numpy as np
import pytest

from _oracles import brute_neg_log_lik, random_general_scenario
from regbound.errors import DegenerateDesign, NonConvergence
from regbound.estimator import (
    FitOptions,
    ObservedData,
    _ts_step,
    _weights,
    _x_step,
    fit_ml,
    fit_ml_batch,
    init_ls,
    lre,
    neg_log_lik,
    register_feature,
    registration_errors,
    tre,
)
from regbound.montecarlo import sample_observation, sample_observations
from regbound.regmodel import GeneralCovariance, IsotropicWeightedCovariance, rotation

from conftest import SQUARE


def _noiseless(scn):
    return ObservedData(scn.cps.X1, scn.X2)


class TestNegLogLik:
    def test_zero_at_truth(self, rotation_scenario):
        scn = rotation_scenario
        t = scn.transform
        # scenario X2 and the objective evaluate A x + s in different orders: rounding only
        assert neg_log_lik(_noiseless(scn), scn.cov, t.A, t.s, scn.cps.X1) < 1e-20

    def test_single_cp_unit(self):
        data = ObservedData(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))
        cov = IsotropicWeightedCovariance(np.ones(1), 1.0, 1.0)
        assert neg_log_lik(data, cov, np.eye(2), np.zeros(2), np.zeros((2, 1))) == pytest.approx(1.0)

    def test_matches_brute_force(self, rng):
        scn = random_general_scenario(rng, d=3, K=7)
        Y1 = rng.normal(size=(3, 7)) * 50
        Y2 = rng.normal(size=(3, 7)) * 50
        A = rng.normal(size=(3, 3))
        s = rng.normal(size=3)
        X1 = rng.normal(size=(3, 7)) * 50
        gen = scn.general_cov
        got = neg_log_lik(ObservedData(Y1, Y2), gen, A, s, X1)
        assert got == pytest.approx(brute_neg_log_lik(Y1, Y2, gen.omega1, gen.omega2, A, s, X1), rel=1e-12)

    def test_rejects_non_spd(self):
        om = np.stack([np.eye(2)] * 4)
        bad = om.copy()
        bad[1] = np.diag([1.0, -1.0])
        data = ObservedData(SQUARE, SQUARE)
        with pytest.raises(ValueError):
            neg_log_lik(data, GeneralCovariance(bad, om), np.eye(2), np.zeros(2), SQUARE)

    def test_rejects_dimension_mismatch(self):
        data = ObservedData(SQUARE, SQUARE)
        with pytest.raises(ValueError):
            neg_log_lik(data, IsotropicWeightedCovariance(np.ones(3), 1.0, 1.0), np.eye(2), np.zeros(2), SQUARE)


class TestObservedData:
    def test_rejects_nonfinite(self):
        Y = SQUARE.copy()
        Y[0, 0] = np.nan
        with pytest.raises(ValueError):
            ObservedData(Y, SQUARE)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            ObservedData(SQUARE, SQUARE[:, :3])


class TestInitLs:
    def test_noiseless_exact(self, rotation_scenario):
        scn = rotation_scenario
        A0, s0 = init_ls(_noiseless(scn))
        np.testing.assert_allclose(A0, scn.transform.A, rtol=0, atol=1e-12)
        np.testing.assert_allclose(s0, scn.transform.s, rtol=1e-10)

    def test_too_few_points(self):
        with pytest.raises(DegenerateDesign):
            init_ls(ObservedData(np.array([[0.0, 1.0], [0.0, 1.0]]), np.array([[0.0, 1.0], [0.0, 1.0]])))

    def test_collinear(self):
        X = np.array([[0.0, 1.0, 2.0, 3.0], [0.0, 2.0, 4.0, 6.0]])
        with pytest.raises(DegenerateDesign):
            init_ls(ObservedData(X, X))

    def test_noisy_close_to_truth(self, rotation_scenario):
        scn = rotation_scenario
        r = np.random.default_rng(5)
        errs = []
        for _ in range(200):
            A0, _ = init_ls(sample_observation(scn, r))
            errs.append(A0[0, 0] - scn.transform.A[0, 0])
        # noise ~ 1 nm over an 81 um grid: slope errors are O(1e-5)
        assert abs(np.mean(errs)) < 1e-5
        assert np.std(errs) < 1e-4


class TestFitMl:
    def test_noiseless_recovers_truth(self, rotation_scenario):
        scn = rotation_scenario
        res = fit_ml(_noiseless(scn), scn.cov)
        assert res.converged
        assert res.iterations <= 2
        assert res.objective < 1e-12
        np.testing.assert_allclose(res.A_hat, scn.transform.A, atol=1e-12)
        np.testing.assert_allclose(res.s_hat, scn.transform.s, rtol=1e-10)
        np.testing.assert_allclose(res.X1_hat, scn.cps.X1, atol=1e-7)

    def test_collinear_raises(self):
        X = np.array([[0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 2.0, 3.0]])
        with pytest.raises(DegenerateDesign):
            fit_ml(ObservedData(X, X + 1.0), IsotropicWeightedCovariance(np.ones(4), 1.0, 1.0))

    @pytest.mark.parametrize("seed", range(5))
    def test_trace_non_increasing(self, seed):
        r = np.random.default_rng(seed)
        scn = random_general_scenario(r, d=2 + seed % 2, K=8, with_feature=False)
        res = fit_ml(sample_observation(scn, r), scn.cov)
        assert res.converged
        assert np.all(np.diff(res.objective_trace) <= 0)

    def test_nonconvergence_carries_result(self, rng):
        scn = random_general_scenario(rng, d=2, K=8, with_feature=False)
        data = sample_observation(scn, rng)
        opts = FitOptions(rtol=0.0, max_iter=2)
        with pytest.raises(NonConvergence) as info:
            fit_ml(data, scn.cov, opts)
        assert info.value.result.iterations == 2
        assert not info.value.result.converged
        res = fit_ml(data, scn.cov, FitOptions(rtol=0.0, max_iter=2, raise_on_nonconvergence=False))
        assert not res.converged

    def test_sub_steps_are_exact_minimisers(self, rng):
        scn = random_general_scenario(rng, d=2, K=7, with_feature=False)
        data = sample_observation(scn, rng)
        W1, W2 = _weights(scn.cov)
        Y1, Y2 = data.Y1[None], data.Y2[None]
        A = scn.transform.A[None] + 0.01
        s = scn.transform.s[None] + 1.0
        X = _x_step(Y1, Y2, W1, W2, A, s)[0]
        # gradient of the objective in x1k vanishes
        for k in range(7):
            g = W1[k] @ (X[:, k] - data.Y1[:, k]) - A[0].T @ W2[k] @ (data.Y2[:, k] - A[0] @ X[:, k] - s[0])
            scale = np.linalg.norm(W1[k] @ data.Y1[:, k]) + np.linalg.norm(A[0].T @ W2[k] @ data.Y2[:, k])
            assert np.linalg.norm(g) < 1e-10 * scale
        A_n, s_n, _ = _ts_step(Y2, W2, X[None])
        # gradient in (A, s) vanishes
        gA = np.zeros((2, 2))
        gs = np.zeros(2)
        for k in range(7):
            r2 = W2[k] @ (data.Y2[:, k] - A_n[0] @ X[:, k] - s_n[0])
            gA += np.outer(r2, X[:, k])
            gs += r2
        scale = sum(np.linalg.norm(W2[k] @ data.Y2[:, k]) * np.linalg.norm(X[:, k]) for k in range(7))
        assert np.linalg.norm(gA) < 1e-10 * scale
        assert np.linalg.norm(gs) < 1e-10 * scale

    def test_fixed_point(self, rotation_scenario, rng):
        scn = rotation_scenario
        data = sample_observation(scn, rng)
        res = fit_ml(data, scn.cov)
        W1, W2 = _weights(scn.cov)
        A2, s2, _ = _ts_step(data.Y2[None], W2, res.X1_hat[None])
        X2 = _x_step(data.Y1[None], data.Y2[None], W1, W2, A2, s2)
        assert np.linalg.norm(A2[0] - res.A_hat) < 1e-9 * np.linalg.norm(res.A_hat)
        assert np.linalg.norm(s2[0] - res.s_hat) < 1e-9 * np.linalg.norm(res.s_hat)
        assert np.linalg.norm(X2[0] - res.X1_hat) < 1e-9 * np.linalg.norm(res.X1_hat)

    def test_translation_equivariance(self, rotation_scenario, rng):
        scn = rotation_scenario
        data = sample_observation(scn, rng)
        t = np.array([1234.0, -567.0])
        shifted = ObservedData(data.Y1 + t[:, None], data.Y2)
        a = fit_ml(data, scn.cov)
        b = fit_ml(shifted, scn.cov)
        assert np.linalg.norm(b.A_hat - a.A_hat) < 1e-9 * np.linalg.norm(a.A_hat)
        expected_s = a.s_hat - a.A_hat @ t
        assert np.linalg.norm(b.s_hat - expected_s) < 1e-9 * np.linalg.norm(expected_s)

    def test_batch_matches_single(self, rotation_scenario, rng):
        scn = rotation_scenario
        Y1, Y2, _ = sample_observations(scn, rng, 6)
        batch = fit_ml_batch(Y1, Y2, scn.cov)
        assert batch.converged.all()
        for r in range(6):
            one = fit_ml(ObservedData(Y1[r], Y2[r]), scn.cov)
            np.testing.assert_allclose(batch.A_hat[r], one.A_hat, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(batch.s_hat[r], one.s_hat, rtol=1e-9)


class TestRegistrationErrors:
    def test_register_identity(self):
        np.testing.assert_array_equal(register_feature(np.eye(2), np.zeros(2), [3.0, 4.0]), [3.0, 4.0])

    def test_register_rotation(self):
        out = register_feature(rotation(30.0), [4800.0, 4800.0], [16000.0, 20000.0])
        np.testing.assert_allclose(out, [8656.4, 30120.5], atol=0.05)

    def test_register_linearity(self, rng):
        A, s = rng.normal(size=(2, 2)), rng.normal(size=2)
        y, z = rng.normal(size=2), rng.normal(size=2)
        np.testing.assert_allclose(
            register_feature(A, s, y + z), register_feature(A, s, y) + A @ z, rtol=1e-13, atol=1e-13
        )

    def test_tre_exact(self, rot30):
        np.testing.assert_array_equal(tre(rot30.A, rot30.s, rot30.A, rot30.s, [1.0, 2.0]), [0.0, 0.0])

    def test_tre_translation_offset(self, rot30):
        X = np.array([[0.0, 100.0, -5.0], [3.0, 7.0, 1e4]])
        out = tre(rot30.A, rot30.s, rot30.A, rot30.s + [1.0, 0.0], X)
        np.testing.assert_allclose(out, np.tile([[-1.0], [0.0]], 3), atol=1e-12)

    def test_tre_random(self, rng):
        A, Ah = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        s, sh, x = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
        np.testing.assert_allclose(tre(A, s, Ah, sh, x), (A @ x + s) - (Ah @ x + sh), rtol=1e-13, atol=1e-14)

    def test_lre_exact(self, rot30):
        x = np.array([16000.0, 20000.0])
        np.testing.assert_allclose(lre(rot30.A, rot30.s, rot30.A, rot30.s, x, x), [0.0, 0.0], atol=1e-11)

    def test_lre_feature_noise(self, rot30):
        x = np.array([16000.0, 20000.0])
        out = lre(rot30.A, rot30.s, rot30.A, rot30.s, x, x + [1.0, 0.0])
        np.testing.assert_allclose(out, [-0.8660, -0.5], atol=1e-4)
        np.testing.assert_allclose(out, -rot30.A @ [1.0, 0.0], atol=1e-10)

    def test_lre_random(self, rng):
        A, Ah = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        s, sh, x, y = (rng.normal(size=2) for _ in range(4))
        np.testing.assert_allclose(lre(A, s, Ah, sh, x, y), A @ x + s - Ah @ y - sh, rtol=1e-13, atol=1e-14)

    def test_combined(self, rot30):
        out = registration_errors(rot30.A, rot30.s, rot30.A, rot30.s, SQUARE, [0.0, 0.0], [0.0, 0.0])
        assert out.tre.shape == (2, 4)
        np.testing.assert_allclose(out.lre, 0.0, atol=1e-12)
        assert registration_errors(rot30.A, rot30.s, rot30.A, rot30.s, SQUARE).lre is None
