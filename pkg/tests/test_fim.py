import numpy as np
import pytest

from _oracles import fd_fim_ftc, fd_fim_tc, random_general_scenario, random_spd, rel_err
from regbound.errors import InvalidScenario, SingularFim
from regbound.fim import (
    assemble_fim_ftc,
    assemble_fim_tc,
    build_fim_ftc,
    build_fim_tc,
    crlb_ff_general,
    crlb_tt,
)
from regbound.montecarlo import make_grid_scenario
from regbound.regmodel import (
    AffineTransform,
    ControlPointSet,
    FeatureSpec,
    GeneralCovariance,
    IsotropicWeightedCovariance,
    RegistrationScenario,
)

from conftest import SQUARE


def _single_cp(x, A=np.eye(2)):
    return RegistrationScenario(
        AffineTransform(A, [0.0, 0.0]),
        ControlPointSet(np.array(x, dtype=float).reshape(2, 1)),
        IsotropicWeightedCovariance(np.ones(1), 1.0, 1.0),
    )


class TestBuildTc:
    def test_single_cp_lambda_block(self):
        blocks = build_fim_tc(_single_cp([3.0, 4.0]))
        np.testing.assert_array_equal(blocks.S_FFGG_blocks[0], 2 * np.eye(2))

    def test_single_cp_unit_basis(self):
        S = build_fim_tc(_single_cp([1.0, 0.0])).S_HH
        chi = np.array([[1.0, 0.0], [0.0, 0.0]])
        X1 = np.array([[1.0, 0.0], [0.0, 0.0]])  # e_1 kron x^T
        X2 = np.array([[0.0, 0.0], [1.0, 0.0]])  # e_2 kron x^T
        Z = np.zeros((2, 2))
        expected = np.block([[chi, Z, X1.T], [Z, chi, X2.T], [X1, X2, np.eye(2)]])
        np.testing.assert_array_equal(S, expected)

    def test_lambda_blocks_general(self, rng):
        scn = random_general_scenario(rng, d=3, K=5)
        blocks = build_fim_tc(scn)
        A = scn.transform.A
        gen = scn.general_cov
        for k in range(5):
            expected = np.linalg.inv(gen.omega1[k]) + A.T @ np.linalg.inv(gen.omega2[k]) @ A
            np.testing.assert_allclose(blocks.S_FFGG_blocks[k], expected, rtol=1e-12)

    @pytest.mark.parametrize("d", [2, 3])
    def test_matches_finite_differences(self, rng, d):
        scn = random_general_scenario(rng, d=d, K=5, with_feature=False)
        J = assemble_fim_tc(build_fim_tc(scn))
        assert rel_err(J, fd_fim_tc(scn)) < 1e-6

    def test_invalid_scenario(self):
        scn = _single_cp([1.0, 1.0], A=np.zeros((2, 2)))
        with pytest.raises(InvalidScenario):
            build_fim_tc(scn)


class TestCrlbTt:
    def test_symmetric_square(self, unit_square):
        rep = crlb_tt(build_fim_tc(unit_square))
        np.testing.assert_allclose(rep.C_TT, 0.5 * np.eye(6), atol=1e-12)

    def test_square_in_micrometres(self):
        # CPs at (+-1000, +-1000) nm: A-blocks scale as 1/Psi = 1e-6, s-block unchanged
        scn = RegistrationScenario(
            AffineTransform(np.eye(2), [10.0, 20.0]),
            ControlPointSet(1000.0 * SQUARE),
            IsotropicWeightedCovariance(np.ones(4), 1.0, 1.0),
        )
        C = crlb_tt(build_fim_tc(scn)).C_TT
        np.testing.assert_allclose(np.diag(C), [0.5e-6] * 4 + [0.5] * 2, rtol=1e-12)

    def test_collinear_is_singular(self):
        scn = RegistrationScenario(
            AffineTransform(np.eye(2), [0.0, 0.0]),
            ControlPointSet(np.array([[0.0, 1.0], [0.0, 1.0]])),
            IsotropicWeightedCovariance(np.ones(2), 1.0, 1.0),
        )
        with pytest.raises(SingularFim):
            crlb_tt(build_fim_tc(scn))

    def test_collinear_many_points_is_singular(self):
        X = np.vstack([np.linspace(-5, 5, 6), 2 * np.linspace(-5, 5, 6)])
        scn = RegistrationScenario(
            AffineTransform(np.eye(2), [0.0, 0.0]),
            ControlPointSet(X),
            IsotropicWeightedCovariance(np.ones(6), 1.0, 1.0),
        )
        with pytest.raises(SingularFim):
            crlb_tt(build_fim_tc(scn))

    @pytest.mark.parametrize("lam", [0.1, 0.5, 0.9])
    def test_shear_matches_dense_inverse(self, lam):
        scn = make_grid_scenario("shear", 9, np.random.default_rng(3), lam=lam)
        blocks = build_fim_tc(scn)
        rep = crlb_tt(blocks)
        dense = np.linalg.inv(assemble_fim_tc(blocks))
        p = blocks.layout.n_transform
        assert rel_err(rep.C_TT, dense[:p, :p]) < 1e-10
        assert rel_err(rep.C_TC, dense[:p, p:]) < 1e-9
        for k, blk in enumerate(rep.C_CC_blocks):
            assert rel_err(blk, dense[p + 2 * k: p + 2 * k + 2, p + 2 * k: p + 2 * k + 2]) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_schur_vs_dense_random(self, seed):
        r = np.random.default_rng(seed)
        scn = random_general_scenario(r, d=2 + seed % 2, K=4 + seed, with_feature=False)
        blocks = build_fim_tc(scn)
        dense = np.linalg.inv(assemble_fim_tc(blocks))
        p = blocks.layout.n_transform
        assert rel_err(crlb_tt(blocks).C_TT, dense[:p, :p]) < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_adding_a_cp_never_loosens(self, seed):
        r = np.random.default_rng(100 + seed)
        scn = random_general_scenario(r, d=2, K=5, with_feature=False)
        gen = scn.general_cov
        x_new = r.uniform(-100, 100, size=(2, 1))
        bigger = RegistrationScenario(
            scn.transform,
            ControlPointSet(np.hstack([scn.cps.X1, x_new])),
            GeneralCovariance(
                np.concatenate([gen.omega1, random_spd(r, 2)[None]]),
                np.concatenate([gen.omega2, random_spd(r, 2)[None]]),
            ),
        )
        C = crlb_tt(build_fim_tc(scn)).C_TT
        C2 = crlb_tt(build_fim_tc(bigger)).C_TT
        assert np.linalg.eigvalsh(C - C2)[0] >= -1e-10 * np.trace(C)

    @pytest.mark.parametrize("seed", range(5))
    def test_blocks_symmetric_psd(self, seed):
        r = np.random.default_rng(200 + seed)
        scn = random_general_scenario(r, d=2 + seed % 2, K=6)
        rep = crlb_ff_general(scn)
        for M in [rep.C_TT, rep.C_FF, *rep.C_CC_blocks]:
            np.testing.assert_allclose(M, M.T, rtol=0, atol=1e-12 * np.abs(M).max())
            assert np.linalg.eigvalsh(M)[0] >= -1e-10 * np.trace(M)


class TestFeature:
    def test_identity_blocks(self):
        x1F = np.array([2.0, -3.0])
        scn = RegistrationScenario(
            AffineTransform(np.eye(2), [0.0, 0.0]),
            ControlPointSet(SQUARE),
            IsotropicWeightedCovariance(np.ones(4), 1.0, 1.0),
            FeatureSpec.isotropic(x1F, 1.0),
        )
        _, fb = build_fim_ftc(scn)
        np.testing.assert_array_equal(fb.A_block, np.eye(2))
        np.testing.assert_array_equal(fb.D_F, np.eye(2))
        # row-stacked vec(A): d(A x)/d vec_rows(A) = I kron x^T
        expected_DT = -np.hstack([np.kron(np.eye(2), x1F[None, :]), np.eye(2)])
        np.testing.assert_array_equal(fb.D_T, expected_DT)

    def test_no_cp_coupling(self, rng):
        scn = random_general_scenario(rng, d=2, K=4)
        blocks, fb = build_fim_ftc(scn)
        J = assemble_fim_ftc(blocks, fb)
        assert np.all(J[:2, 8:] == 0.0)
        assert np.all(J[8:, :2] == 0.0)

    @pytest.mark.parametrize("d", [2, 3])
    def test_matches_finite_differences(self, rng, d):
        scn = random_general_scenario(rng, d=d, K=5)
        J = assemble_fim_ftc(*build_fim_ftc(scn))
        assert rel_err(J, fd_fim_ftc(scn)) < 1e-6

    def test_missing_feature(self, rng):
        scn = random_general_scenario(rng, with_feature=False)
        with pytest.raises(InvalidScenario):
            build_fim_ftc(scn)

    def test_registration_adds_uncertainty(self, rng):
        scn = random_general_scenario(rng, d=2, K=6)
        C_FF = crlb_ff_general(scn).C_FF
        A = scn.transform.A
        floor = A @ scn.feature.omega1 @ A.T
        assert np.linalg.eigvalsh(C_FF - floor)[0] >= -1e-12 * np.trace(C_FF)

    def test_perfect_registration_limit(self, rotation_scenario):
        scn = rotation_scenario
        tiny = scn.with_feature(None)
        cov = scn.cov.scaled(1e-10)
        scn0 = RegistrationScenario(tiny.transform, tiny.cps, cov, scn.feature)
        A = scn.transform.A
        floor = A @ scn.feature.omega1 @ A.T
        np.testing.assert_allclose(crlb_ff_general(scn0).C_FF, floor, rtol=1e-8, atol=1e-8 * floor.max())

    def test_correlated_shape_matches_dense(self):
        scn = make_grid_scenario("correlated", 16, np.random.default_rng(7))
        C = crlb_ff_general(scn).C_FF
        dense = np.linalg.inv(assemble_fim_ftc(*build_fim_ftc(scn)))
        assert rel_err(C, dense[:2, :2]) < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_equals_delta_method(self, seed):
        # C_FF = A Omega_1F A^T + D C_TT D^T with D = d(A x1F + s)/d theta_T
        r = np.random.default_rng(300 + seed)
        scn = random_general_scenario(r, d=2 + seed % 2, K=7)
        rep = crlb_ff_general(scn)
        d = scn.d
        D = np.hstack([np.kron(np.eye(d), scn.feature.x1[None, :]), np.eye(d)])
        A = scn.transform.A
        expected = A @ scn.feature.omega1 @ A.T + D @ rep.C_TT @ D.T
        assert rel_err(rep.C_FF, expected) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_subblock_identity(self, seed):
        r = np.random.default_rng(400 + seed)
        scn = random_general_scenario(r, d=2 + seed % 2, K=5 + seed)
        d = scn.d
        full = np.linalg.inv(assemble_fim_ftc(*build_fim_ftc(scn)))
        tc = np.linalg.inv(assemble_fim_tc(build_fim_tc(scn)))
        assert rel_err(full[d:, d:], tc) < 1e-9
