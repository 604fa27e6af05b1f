import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointmc.core import DataError, NumericalError
from jointmc.gaussian import (
    BlockCov,
    M_schur,
    compute_M,
    compute_stars,
    hat_iteration,
    iteration_matrix,
    iteration_table,
    psi_log_norms,
    random_cov,
    target_coeffs,
)


def cov_111(a, b):
    return BlockCov(np.array([[1.0, 0.0, a], [0.0, 1.0, b], [a, b, 1.0]]), 1, 1)


@st.composite
def covariances(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    d = draw(st.integers(2, 8))
    d_phi = draw(st.integers(1, d - 1))
    return random_cov(d, d_phi, np.random.default_rng(seed))


class TestBlockCov:
    def test_rejects_asymmetric(self):
        S = np.eye(3)
        S[0, 1] = 0.1
        with pytest.raises(DataError):
            BlockCov(S, 1, 1)

    def test_rejects_non_pd(self):
        with pytest.raises(NumericalError):
            BlockCov(np.array([[1.0, 2.0, 0], [2.0, 1.0, 0], [0, 0, 1.0]]), 1, 1)

    def test_rejects_shape(self):
        with pytest.raises(DataError):
            BlockCov(np.eye(4), 1, 1)
        with pytest.raises(DataError):
            BlockCov.from_matrix(np.eye(2), 1)

    def test_blocks(self):
        S = np.arange(16.0).reshape(4, 4)
        cov = BlockCov(S @ S.T + np.eye(4), 2, 1)
        np.testing.assert_array_equal(cov.block("phi", "y"), cov.Sigma[:2, 3:])
        np.testing.assert_array_equal(cov.block("phi+y", "psi"), cov.Sigma[[0, 1, 3]][:, [2]])


class TestStars:
    def test_independence_zero(self):
        stars = compute_stars(BlockCov(np.diag([1.0, 2.0, 3.0, 4.0]), 2, 1))
        for arr in (stars.alpha_phi, stars.alpha_psi, stars.beta_phi, stars.beta_y):
            np.testing.assert_array_equal(arr, 0.0)

    def test_hand_111(self):
        a, b = 0.3, -0.6
        stars = compute_stars(cov_111(a, b))
        assert stars.alpha_phi[0] == pytest.approx(a) and stars.alpha_psi[0] == pytest.approx(b)
        # Psi on (Phi, Y): solve [[1, a], [a, 1]] c = [0, b]
        c = np.linalg.solve([[1, a], [a, 1]], [0, b])
        assert stars.beta_phi[0, 0] == pytest.approx(c[0]) and stars.beta_y[0, 0] == pytest.approx(c[1])

    @settings(max_examples=50, deadline=None)
    @given(cov=covariances())
    def test_residual_covariances_vanish(self, cov):
        stars = compute_stars(cov)
        S = cov.Sigma
        a = np.concatenate([stars.alpha_phi, stars.alpha_psi])
        # Cov(Y - a.(Phi,Psi), (Phi,Psi)) = Sigma_{(Phi Psi) y} - Sigma_{(Phi Psi)(Phi Psi)} a
        np.testing.assert_allclose(S[: cov.d, cov.d] - S[: cov.d, : cov.d] @ a, 0.0, atol=1e-10)
        B = np.vstack([stars.beta_phi, stars.beta_y])
        idx = list(range(cov.d_phi)) + [cov.d]
        np.testing.assert_allclose(S[np.ix_(idx, range(cov.d_phi, cov.d))] - S[np.ix_(idx, idx)] @ B, 0.0, atol=1e-10)


class TestRate:
    def test_conditional_independence(self):
        # Psi = Phi + noise, Y = Phi + noise
        S = np.array([[1.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])
        cov = BlockCov(S, 1, 1)
        assert compute_M(cov) == pytest.approx(0.0, abs=1e-14)
        for _, psi in hat_iteration(cov, 5)[1:]:
            np.testing.assert_allclose(psi, 0.0, atol=1e-14)

    def test_111_a0_b05(self):
        cov = cov_111(0.0, 0.5)
        assert compute_M(cov) == pytest.approx(0.25, abs=1e-12)
        assert M_schur(cov) == pytest.approx(0.25, abs=1e-12)

    def test_near_singular_approaches_one(self):
        rates = []
        for eps in [1e-1, 1e-2, 1e-3, 1e-4]:
            # Psi = Y + sqrt(eps) noise
            S = np.array([[1.0, 0.5, 0.5], [0.5, 1.0 + eps, 1.0], [0.5, 1.0, 1.0]])
            rates.append(compute_M(BlockCov(S, 1, 1)))
        assert all(np.diff(rates) > 0) and rates[-1] > 0.99 and rates[-1] < 1.0

    @settings(max_examples=100, deadline=None)
    @given(cov=covariances())
    def test_formulas_agree(self, cov):
        M = compute_M(cov)
        assert 0.0 <= M < 1.0
        assert abs(M - M_schur(cov)) <= 1e-10

    @settings(max_examples=50, deadline=None)
    @given(cov=covariances())
    def test_fixed_point_identity(self, cov):
        stars = compute_stars(cov)
        M = (stars.beta_y @ stars.alpha_psi).item()
        lhs = (stars.alpha_phi + stars.beta_phi @ stars.alpha_psi) / (1 - M)
        np.testing.assert_allclose(lhs, target_coeffs(cov), atol=1e-10)


class TestIteration:
    def test_t0_is_stars(self):
        cov = random_cov(5, 2, np.random.default_rng(3))
        stars = compute_stars(cov)
        phi0, psi0 = hat_iteration(cov, 0)[0]
        np.testing.assert_array_equal(phi0, stars.alpha_phi)
        np.testing.assert_array_equal(psi0, stars.alpha_psi)

    def test_matches_population_regression(self):
        # one population step: regress Y on (Phi,Psi) -> f; pseudolabel E[f | Phi, Y]; regress it on (Phi,Psi)
        cov = random_cov(4, 2, np.random.default_rng(7))
        S = cov.Sigma
        d, dp = cov.d, cov.d_phi
        z = np.concatenate([compute_stars(cov).alpha_phi, compute_stars(cov).alpha_psi])
        idx = list(range(dp)) + [d]
        Sxx = S[:d, :d]
        for phi, psi in hat_iteration(cov, 4)[1:]:
            # f = z.(Phi,Psi); E[f | Phi, Y] = w.(Phi, Y) with w = Sigma_{(Phi,Y)}^{-1} Cov((Phi,Y), f)
            w = np.linalg.solve(S[np.ix_(idx, idx)], S[np.ix_(idx, range(d))] @ z)
            # next iterate regresses w.(Phi, Y) on (Phi, Psi)
            z = np.linalg.solve(Sxx, S[np.ix_(range(d), idx)] @ w)
            np.testing.assert_allclose(phi, z[:dp], atol=1e-10)
            np.testing.assert_allclose(psi, z[dp:], atol=1e-10)

    def test_converges_to_target(self):
        cov = random_cov(6, 3, np.random.default_rng(11))
        phi, psi = hat_iteration(cov, 200)[-1]
        np.testing.assert_allclose(phi, target_coeffs(cov), atol=1e-8)
        table = iteration_table(cov, 200)
        M = compute_M(cov)
        if M > 1e-8:
            assert table[100]["ratio"] == pytest.approx(M, abs=1e-6)

    def test_iteration_matrix_block_structure(self):
        cov = random_cov(5, 2, np.random.default_rng(0))
        A = iteration_matrix(cov)
        np.testing.assert_array_equal(A[:2, :2], np.eye(2))
        np.testing.assert_array_equal(A[2:, :2], 0.0)
        assert np.max(np.abs(np.linalg.eigvals(A[2:, 2:]))) == pytest.approx(compute_M(cov), abs=1e-12)

    def test_log_norms_match_plain_norms(self):
        cov = random_cov(5, 2, np.random.default_rng(4))
        logs = psi_log_norms(cov, 10)
        plain = [np.linalg.norm(psi) for _, psi in hat_iteration(cov, 10)]
        np.testing.assert_allclose(np.exp(logs), plain, rtol=1e-10)

    def test_ratio_survives_underflow(self):
        cov = random_cov(6, 3, np.random.default_rng(11))
        M = compute_M(cov)
        assert M < 0.01
        table = iteration_table(cov, 300)
        assert table[300]["ratio"] == pytest.approx(M, rel=1e-8)

    def test_negative_T(self):
        with pytest.raises(ValueError):
            hat_iteration(cov_111(0.1, 0.1), -1)

    def test_target_coeffs(self):
        np.testing.assert_array_equal(target_coeffs(BlockCov(np.diag([1.0, 1.0, 1.0]), 1, 1)), [0.0])
        S = np.array([[2.0, 0.0, 1.0], [0.0, 1.0, 0.2], [1.0, 0.2, 2.0]])
        assert target_coeffs(BlockCov(S, 1, 1))[0] == pytest.approx(0.5)
