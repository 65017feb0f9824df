"""Tests for Kronecker-structured linear algebra.

Expected values are either evaluated by hand from the defining formulas or
computed by independent brute-force oracles (index loops, materialized SVDs,
Monte-Carlo sampling, golden-section search) inside the test.
"""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from cllab import kron
from cllab.kron import (
    KronFactorPair,
    full_kl_precision,
    inverse_rearrange,
    kl_sum,
    materialize_kron,
    mse_sum,
    naive_factor_sum,
    rearrange,
    regularized_kf_inverse,
    scaled_additive_sum,
    scaled_kl,
    symmetrize,
)


def random_psd(rng, n, rank=None):
    g = rng.standard_normal((n, rank or n + 2))
    return symmetrize(g @ g.T / (rank or n + 2))


def random_spd(rng, n):
    return random_psd(rng, n) + 0.1 * np.eye(n)


def kron_oracle(a, b):
    """Entry-by-entry double loop over the defining index formula."""
    n, m = a.shape[0], b.shape[0]
    out = np.zeros((n * m, n * m))
    for i in range(n):
        for j in range(n):
            for k in range(m):
                for l in range(m):
                    out[m * i + k, m * j + l] = a[i, j] * b[k, l]
    return out


def rearrange_oracle(z, n, m):
    """Independent index-loop implementation of the rearrangement operator."""
    out = np.zeros((n * n, m * m))
    for i in range(n):
        for j in range(n):
            for k in range(m):
                for l in range(m):
                    out[i + j * n, k + l * m] = z[m * i + k, m * j + l]
    return out


class TestMaterialize:
    def test_identity(self):
        pair = KronFactorPair(np.eye(2), np.eye(2))
        np.testing.assert_array_equal(materialize_kron(pair), np.eye(4))

    def test_definition_unrolled(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        g = np.array([[0.0, 1.0], [1.0, 0.0]])
        z = materialize_kron(KronFactorPair(a, g))
        for i in range(2):
            for j in range(2):
                np.testing.assert_array_equal(z[2 * i : 2 * i + 2, 2 * j : 2 * j + 2], a[i, j] * g)

    def test_matches_index_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        g = rng.standard_normal((3, 3))
        np.testing.assert_allclose(
            materialize_kron(KronFactorPair(a, g)), kron_oracle(a, g), rtol=0, atol=0
        )

    def test_dimension_guard(self):
        pair = KronFactorPair(np.eye(70), np.eye(70))
        with pytest.raises(ValueError, match="materialize"):
            materialize_kron(pair)


class TestRearrange:
    def test_identity_factors_rank_one(self):
        z = materialize_kron(KronFactorPair(np.eye(2), np.eye(2)))
        r = rearrange(z, 2, 2)
        v = np.eye(2).reshape(-1, order="F")
        np.testing.assert_array_equal(r, np.outer(v, v))

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((4, 4))
        np.testing.assert_array_equal(inverse_rearrange(rearrange(z, 2, 2), 2, 2), z)

    def test_matches_index_oracle(self):
        rng = np.random.default_rng(2)
        for n, m in [(2, 3), (3, 2), (4, 4)]:
            z = rng.standard_normal((n * m, n * m))
            np.testing.assert_array_equal(rearrange(z, n, m), rearrange_oracle(z, n, m))

    def test_sum_of_two_products_has_rank_two(self):
        rng = np.random.default_rng(3)
        a, c = random_psd(rng, 3), random_psd(rng, 3)
        b, d = random_psd(rng, 4), random_psd(rng, 4)
        z = np.kron(a, b) + np.kron(c, d)
        s = np.linalg.svd(rearrange(z, 3, 4), compute_uv=False)
        assert np.sum(s > 1e-10 * s[0]) <= 2

    def test_consistency_all_shapes(self):
        rng = np.random.default_rng(4)
        for n in range(1, 7):
            for m in range(1, 7):
                a = rng.standard_normal((n, n))
                b = rng.standard_normal((m, m))
                r = rearrange(np.kron(a, b), n, m)
                expected = np.outer(a.reshape(-1, order="F"), b.reshape(-1, order="F"))
                np.testing.assert_allclose(r, expected, rtol=0, atol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rearrange(np.eye(5), 2, 2)


def residual_trace_norm(a, b, c, d, pi):
    """Trace norm of the scaled-additive residual pi^-1 a(x)d + pi c(x)b."""
    return np.trace(np.kron(a, d)) / pi + pi * np.trace(np.kron(c, b))


class TestScaledAdditive:
    def test_all_identity(self):
        pair = scaled_additive_sum(np.eye(2), np.eye(2), np.eye(2), np.eye(2))
        np.testing.assert_allclose(pair.left, 2 * np.eye(2))
        np.testing.assert_allclose(pair.right, 2 * np.eye(2))

    def test_hand_evaluation(self):
        # traces (8, 2, 2, 2) give pi = sqrt(8*2 / (2*2)) = 2, so the result is
        # (4I + 2I, I + I/2) = (6I, 1.5I).
        pair = scaled_additive_sum(4 * np.eye(2), np.eye(2), np.eye(2), np.eye(2))
        np.testing.assert_allclose(pair.left, 6 * np.eye(2))
        np.testing.assert_allclose(pair.right, 1.5 * np.eye(2))

    def test_pi_minimizes_residual_bound(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a, c = random_psd(rng, 3), random_psd(rng, 3)
            b, d = random_psd(rng, 4), random_psd(rng, 4)
            pair = scaled_additive_sum(a, b, c, d)
            # recover the returned pi from the left factor
            pi = (np.trace(pair.left) - np.trace(a)) / np.trace(c)
            at_pi = residual_trace_norm(a, b, c, d, pi)
            assert at_pi <= residual_trace_norm(a, b, c, d, pi / 2) + 1e-12
            assert at_pi <= residual_trace_norm(a, b, c, d, 2 * pi) + 1e-12

    def test_zero_trace_rejected(self):
        with pytest.raises(ValueError, match="trace"):
            scaled_additive_sum(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2))


class TestMseSum:
    def test_rank_one_case_exact(self):
        rng = np.random.default_rng(6)
        a, b = random_psd(rng, 3), random_psd(rng, 3)
        pair = mse_sum(a, b, 2 * a, 3 * b)
        np.testing.assert_allclose(
            materialize_kron(pair), 7 * np.kron(a, b), rtol=0, atol=1e-10
        )

    def test_near_zero_second_term(self):
        rng = np.random.default_rng(7)
        a, b = random_spd(rng, 3), random_spd(rng, 3)
        eps = 1e-9
        pair = mse_sum(a, b, eps * np.eye(3), eps * np.eye(3))
        scale = np.trace(pair.left) / np.trace(a)
        np.testing.assert_allclose(pair.left / scale, a, atol=1e-6)
        np.testing.assert_allclose(pair.right * scale, b, atol=1e-6)

    def test_error_matches_materialized_svd_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            a, c = random_psd(rng, 3), random_psd(rng, 3)
            b, d = random_psd(rng, 3), random_psd(rng, 3)
            z = np.kron(a, b) + np.kron(c, d)
            pair = mse_sum(a, b, c, d)
            err = np.linalg.norm(z - materialize_kron(pair))
            s = np.linalg.svd(rearrange(z, 3, 3), compute_uv=False)
            oracle_err = np.sqrt(np.sum(s[1:] ** 2))
            assert abs(err - oracle_err) < 1e-10

    def test_degenerate_rejected(self):
        z = np.zeros((2, 2))
        with pytest.raises(ValueError, match="zero"):
            mse_sum(z, z, z, z)

    def test_beats_other_methods_on_frobenius(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n = int(rng.integers(2, 6))
            m = int(rng.integers(2, 6))
            a, c = random_psd(rng, n), random_psd(rng, n)
            b, d = random_psd(rng, m), random_psd(rng, m)
            z = np.kron(a, b) + np.kron(c, d)
            err = {
                method: np.linalg.norm(z - materialize_kron(f(a, b, c, d)))
                for method, f in [
                    ("mse", mse_sum),
                    ("scaled", scaled_additive_sum),
                    ("naive", naive_factor_sum),
                ]
            }
            assert err["mse"] <= err["scaled"] + 1e-10
            assert err["mse"] <= err["naive"] + 1e-10


class TestKlSum:
    def test_identity_fixed_point(self):
        # the fixed point x*y = 2 is exact; the damped iteration reaches it to
        # within the 1e-9 stopping criterion on the KL objective
        pair = kl_sum(np.eye(2), np.eye(2), np.eye(2), np.eye(2))
        np.testing.assert_allclose(materialize_kron(pair), 2 * np.eye(4), rtol=1e-4)

    def test_near_zero_second_term(self):
        rng = np.random.default_rng(10)
        a, b = random_spd(rng, 3), random_spd(rng, 3)
        eps = 1e-8
        pair = kl_sum(a, b, eps * np.eye(3), eps * np.eye(3))
        z = np.kron(a, b) + eps**2 * np.eye(9)
        assert full_kl_precision(materialize_kron(pair), z) < 1e-6

    def test_beats_baselines_on_kl(self):
        rng = np.random.default_rng(11)
        wins_scaled = wins_naive = 0
        trials = 100
        for _ in range(trials):
            a, c = random_spd(rng, 5), random_spd(rng, 5)
            b, d = random_spd(rng, 5), random_spd(rng, 5)
            z = np.kron(a, b) + np.kron(c, d)
            kl_by_method = {
                method: full_kl_precision(materialize_kron(f(a, b, c, d)), z)
                for method, f in [
                    ("kl", kl_sum),
                    ("scaled", scaled_additive_sum),
                    ("naive", naive_factor_sum),
                ]
            }
            wins_scaled += kl_by_method["kl"] < kl_by_method["scaled"]
            wins_naive += kl_by_method["kl"] < kl_by_method["naive"]
        assert wins_scaled >= 95
        assert wins_naive >= 95

    def test_never_worse_than_initialization(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            a, c = random_psd(rng, 4) + 1e-6 * np.eye(4), random_psd(rng, 4)
            b, d = random_psd(rng, 3) + 1e-6 * np.eye(3), random_psd(rng, 3)
            z = np.kron(a, b) + np.kron(c, d)
            kl_res = full_kl_precision(materialize_kron(kl_sum(a, b, c, d)), z)
            kl_init = full_kl_precision(
                materialize_kron(scaled_additive_sum(a, b, c, d)), z
            )
            assert kl_res <= kl_init + 1e-9

    def test_factors_symmetric_psd(self):
        rng = np.random.default_rng(13)
        for f in (kl_sum, mse_sum, scaled_additive_sum):
            a, c = random_psd(rng, 4), random_psd(rng, 4)
            b, d = random_psd(rng, 3), random_psd(rng, 3)
            pair = f(a, b, c, d)
            kron.validate_factor_pair(pair)

    def test_matches_direct_numerical_minimizer(self):
        from scipy.optimize import minimize

        rng = np.random.default_rng(20)
        n, m = 3, 2
        a, c = random_spd(rng, n), random_spd(rng, n)
        b, d = random_spd(rng, m), random_spd(rng, m)
        z = np.kron(a, b) + np.kron(c, d)
        ours = full_kl_precision(materialize_kron(kl_sum(a, b, c, d)), z)

        def unpack(v):
            lx = np.zeros((n, n))
            lx[np.tril_indices(n)] = v[: n * (n + 1) // 2]
            ly = np.zeros((m, m))
            ly[np.tril_indices(m)] = v[n * (n + 1) // 2 :]
            return lx @ lx.T + 1e-12 * np.eye(n), ly @ ly.T + 1e-12 * np.eye(m)

        def objective(v):
            x, y = unpack(v)
            try:
                return full_kl_precision(np.kron(x, y), z)
            except np.linalg.LinAlgError:
                return 1e9

        start = np.concatenate(
            [
                np.linalg.cholesky(a + c)[np.tril_indices(n)],
                np.linalg.cholesky(b + d)[np.tril_indices(m)],
            ]
        )
        brute = minimize(
            objective, start, method="Nelder-Mead",
            options={"maxiter": 20000, "xatol": 1e-12, "fatol": 1e-14},
        ).fun
        assert ours <= brute + 1e-6


class TestFullKl:
    def test_equal_precisions(self):
        lam = np.diag([1.0, 3.0])
        assert full_kl_precision(lam, lam) == pytest.approx(0.0, abs=1e-12)

    def test_hand_evaluation(self):
        # (log 1 - log 4 + 4 - 2) / 2 = 1 - log 2
        val = full_kl_precision(np.eye(2), 2 * np.eye(2))
        assert val == pytest.approx(1 - np.log(2), abs=1e-12)

    def test_against_monte_carlo_oracle(self):
        rng = np.random.default_rng(14)
        lam1, lam2 = random_spd(rng, 3), random_spd(rng, 3)
        cov1 = np.linalg.inv(lam1)
        xs = rng.multivariate_normal(np.zeros(3), cov1, size=200_000)
        # log q - log p up to the shared normalizers, which are added back in closed form
        quad = 0.5 * (np.einsum("bi,ij,bj->b", xs, lam2, xs) - np.einsum("bi,ij,bj->b", xs, lam1, xs))
        const = 0.5 * (np.linalg.slogdet(lam1)[1] - np.linalg.slogdet(lam2)[1])
        samples = quad + const
        mc, se = samples.mean(), samples.std(ddof=1) / np.sqrt(len(samples))
        assert abs(full_kl_precision(lam1, lam2) - mc) < 3 * se

    def test_nonnegative(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            lam1, lam2 = random_spd(rng, 4), random_spd(rng, 4)
            assert full_kl_precision(lam1, lam2) >= -1e-9

    def test_singular_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            full_kl_precision(np.diag([1.0, 0.0]), np.eye(2))


class TestScaledKl:
    def test_proportional_precisions_give_zero(self):
        rng = np.random.default_rng(16)
        lam2 = random_spd(rng, 3)
        for c in (0.1, 1.0, 7.3):
            assert scaled_kl(c * lam2, lam2) == pytest.approx(0.0, abs=1e-10)

    def test_hand_evaluation(self):
        # (-log 4 + 2 log(5/2)) / 2
        val = scaled_kl(np.eye(2), np.diag([1.0, 4.0]))
        assert val == pytest.approx(0.5 * (-np.log(4) + 2 * np.log(2.5)), abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            lam1, lam2 = random_spd(rng, 4), random_spd(rng, 4)
            assert scaled_kl(3 * lam1, lam2) == pytest.approx(scaled_kl(lam1, lam2), abs=1e-12)

    def test_matches_golden_section_oracle(self):
        rng = np.random.default_rng(18)
        for _ in range(10):
            lam1, lam2 = random_spd(rng, 4), random_spd(rng, 4)
            res = minimize_scalar(
                lambda logc: full_kl_precision(np.exp(logc) * lam1, lam2),
                bracket=(-10.0, 0.0, 10.0),
                method="golden",
                options={"xtol": 1e-12},
            )
            assert scaled_kl(lam1, lam2) == pytest.approx(res.fun, abs=1e-6)


class TestRegularizedInverse:
    def test_identity_with_unit_alpha(self):
        prior = KronFactorPair(np.eye(2), np.eye(2))
        p_l, p_r = regularized_kf_inverse(prior, 1.0)
        np.testing.assert_allclose(p_l, np.eye(2) / np.sqrt(2), rtol=1e-4)
        np.testing.assert_allclose(p_r, np.eye(2) / np.sqrt(2), rtol=1e-4)
        np.testing.assert_allclose(np.kron(p_r, p_l), 0.5 * np.eye(4), rtol=1e-4)

    def test_alpha_zero_is_plain_inverse(self):
        rng = np.random.default_rng(19)
        a, g = random_spd(rng, 3), random_spd(rng, 4)
        p_l, p_r = regularized_kf_inverse(KronFactorPair(a, g), 0.0)
        np.testing.assert_allclose(p_l, np.linalg.inv(g), atol=1e-10)
        np.testing.assert_allclose(p_r, np.linalg.inv(a), atol=1e-10)

    def test_anisotropic_attenuation(self):
        prior = KronFactorPair(np.diag([10.0, 0.1]), np.eye(2))
        _, p_r = regularized_kf_inverse(prior, 0.1)
        w = np.linalg.eigvalsh(p_r)
        # step sizes along the stiff direction shrink at least 50x more
        assert w[-1] / w[0] >= 50
