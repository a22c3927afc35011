import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from mtgpfuse import kernels as K
from mtgpfuse.errors import IllConditionedError, ParameterError
from mtgpfuse.gp import CovarianceMode, GpModel
from mtgpfuse.linalg import jitter_cholesky

SE, NN, M3 = K.KernelFamily.SQEXP, K.KernelFamily.NN, K.KernelFamily.MATERN3
LOG2PI = math.log(2 * math.pi)


def se(ls, sv=1.0):
    return K.KernelParams(SE, ls, signal_variance=sv)


class TestJitter:
    def test_well_conditioned_needs_none(self):
        F = jitter_cholesky(np.array([[2.0, 0.5], [0.5, 1.0]]))
        assert F.jitter == 0.0
        assert F.logdet() == pytest.approx(math.log(1.75), rel=1e-14)

    def test_singular_gets_jitter(self):
        F = jitter_cholesky(np.ones((3, 3)))
        assert 0 < F.jitter <= 1e-4

    def test_hopeless_matrix(self):
        with pytest.raises(IllConditionedError) as exc:
            jitter_cholesky(np.array([[2.0, 0.0], [0.0, -1.0]]))
        assert exc.value.jitter == pytest.approx(1e-4 * 0.5)

    def test_non_finite(self):
        with pytest.raises(IllConditionedError):
            jitter_cholesky(np.array([[np.nan]]))


class TestGram:
    def test_single_point_with_noise(self):
        m = GpModel(se((1.0,)), 0.25, [[0.0]], [0.0])
        np.testing.assert_array_equal(m.gram(), [[1.25]])

    def test_duplicate_points_rank_one(self):
        m = GpModel(se((1.0,)), 0.0, [[0.3], [0.3]], [0.0, 0.0])
        G = m.gram(with_noise=False)
        assert abs(np.linalg.det(G)) < 1e-15

    def test_matches_loop_oracle(self, rng):
        p = se(rng.uniform(0.5, 2, 3), sv=1.3)
        X = rng.normal(size=(3, 3))
        m = GpModel(p, 0.1, X, np.zeros(3))
        G = O.loop_matrix(lambda a, b: O.sqexp(p.length_scales, 1.3, a, b), X, X) + 0.1 * np.eye(3)
        np.testing.assert_allclose(m.gram(), G, rtol=1e-13)

    def test_diagonal_dominates(self, rng):
        for fam in (SE, M3):
            p = K.KernelParams(fam, rng.uniform(0.5, 2, 3))
            G = GpModel(p, 0.0, rng.normal(size=(8, 3)), np.zeros(8)).gram(False)
            assert np.all(np.abs(G) <= np.diag(G)[:, None] + 1e-15)

    def test_auto_mode_uses_prefactor(self):
        p = se((1.0, 2.0), sv=5.0)
        m = GpModel(p, 0.1, [[0.0, 0.0]], [0.0], kf=0.5)
        assert m.mode is CovarianceMode.MTGP_AUTO
        assert m.gram()[0, 0] == pytest.approx(0.5 * math.pi * 2.0 + 0.1, rel=1e-14)


class TestValidation:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            GpModel(se((1.0,)), 0.1, [[0.0], [1.0]], [0.0])

    def test_negative_noise(self):
        with pytest.raises(ParameterError):
            GpModel(se((1.0,)), -0.1, [[0.0]], [0.0])

    def test_negative_kf(self):
        with pytest.raises(ParameterError):
            GpModel(se((1.0,)), 0.1, [[0.0]], [0.0], kf=-1.0)


class TestPosterior:
    def test_interpolates_single_point(self):
        m = GpModel(se((1.0,)), 0.0, [[0.5]], [1.7])
        post = m.posterior([[0.5]], include_noise=False)
        assert post.mean[0] == pytest.approx(1.7, abs=1e-10)
        assert abs(post.variance[0]) <= 1e-10

    def test_far_test_point(self):
        m = GpModel(se((1.0,), sv=2.0), 0.01, [[0.0], [0.5]], [1.0, -2.0])
        post = m.posterior([[1e3]])
        assert abs(post.mean[0]) < 1e-6 * 2.0
        assert post.variance[0] == pytest.approx(2.0 + 0.01, rel=1e-12)

    def test_offset_restored(self):
        m = GpModel.from_targets(se((1.0,)), 0.1, [[0.0], [1.0]], [10.0, 12.0])
        assert m.offset == 11.0
        assert m.posterior([[1e4]]).mean[0] == pytest.approx(11.0)

    def test_no_data_returns_prior(self):
        m = GpModel(se((1.0,), sv=3.0), 0.5, np.zeros((0, 1)), [], offset=2.0)
        post = m.posterior([[0.0], [1.0]])
        np.testing.assert_allclose(post.mean, 2.0)
        np.testing.assert_allclose(post.variance, 3.5)

    @pytest.mark.parametrize("fam", [SE, NN, M3])
    def test_dense_inverse_oracle(self, fam, rng):
        bias = 0.7 if fam is NN else None
        p = K.KernelParams(fam, (0.8,), bias, 1.4)
        X, Xs = rng.uniform(-2, 2, (5, 1)), rng.uniform(-2, 2, (3, 1))
        z = rng.normal(size=5)
        if fam is SE:
            f = lambda a, b: O.sqexp(p.length_scales, 1.4, a, b)
        elif fam is M3:
            f = lambda a, b: O.matern3(p.length_scales, 1.4, a, b)
        else:
            f = lambda a, b: O.nn(p.length_scales, bias, 1.4, a, b)
        Kxx = O.loop_matrix(f, X, X) + 0.05 * np.eye(5)
        mean, var, lml = O.dense_gp(Kxx, O.loop_matrix(f, Xs, X), np.diag(O.loop_matrix(f, Xs, Xs)) + 0.05, z)
        m = GpModel(p, 0.05, X, z)
        post = m.posterior(Xs)
        np.testing.assert_allclose(post.mean, mean, rtol=1e-8)
        np.testing.assert_allclose(post.variance, var, rtol=1e-8)
        assert m.log_marginal_likelihood() == pytest.approx(lml, rel=1e-8)

    def test_chunking_is_invisible(self, rng):
        m = GpModel(se((0.7, 1.2)), 0.1, rng.normal(size=(20, 2)), rng.normal(size=20))
        Xs = rng.normal(size=(37, 2))
        a, b = m.posterior(Xs, chunk=5), m.posterior(Xs)
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-13)
        np.testing.assert_allclose(a.variance, b.variance, rtol=1e-13)

    def test_interpolation_property(self, rng):
        # well separated grid, noise free
        X = np.arange(100, dtype=float)[:, None] * 0.25
        z = np.sin(X[:, 0])
        m = GpModel(se((1.0,)), 0.0, X, z)
        post = m.posterior(X, include_noise=False)
        assert m.factor.jitter <= 1e-10 * 1.0
        np.testing.assert_allclose(post.mean, z, rtol=1e-6, atol=1e-6 * np.abs(z).max())

    @given(st.integers(0, 10_000))
    def test_variance_shrinks_with_data(self, seed):
        r = np.random.default_rng(seed)
        X = r.uniform(-3, 3, (6, 1))
        Xs = r.uniform(-3, 3, (4, 1))
        p = se((r.uniform(0.3, 2),))
        small = GpModel(p, 0.05, X[:5], np.zeros(5)).posterior(Xs).variance
        big = GpModel(p, 0.05, X, np.zeros(6)).posterior(Xs).variance
        assert np.all(big <= small + 1e-8)


class TestLml:
    def test_unit_gram_zero_target(self):
        m = GpModel(se((1.0,), sv=0.75), 0.25, [[0.0]], [0.0])
        assert m.log_marginal_likelihood() == pytest.approx(-0.5 * LOG2PI, abs=1e-14)

    def test_unit_gram_unit_target(self):
        m = GpModel(se((1.0,), sv=0.75), 0.25, [[0.0]], [1.0])
        assert m.log_marginal_likelihood() == pytest.approx(-0.5 - 0.5 * LOG2PI, abs=1e-14)

    def test_terms_sum_exactly(self, rng):
        m = GpModel(se((1.0, 0.5)), 0.1, rng.normal(size=(4, 2)), rng.normal(size=4))
        fit, cx, const = m.lml_terms()
        assert fit + cx + const == m.log_marginal_likelihood()

    def test_matches_explicit_determinant(self, rng):
        p = se((0.9, 1.1, 0.6), sv=2.0)
        X, z = rng.normal(size=(4, 3)), rng.normal(size=4)
        Kxx = O.loop_matrix(lambda a, b: O.sqexp(p.length_scales, 2.0, a, b), X, X) + 0.2 * np.eye(4)
        direct = -0.5 * z @ np.linalg.inv(Kxx) @ z - 0.5 * math.log(np.linalg.det(Kxx)) - 2 * LOG2PI
        assert GpModel(p, 0.2, X, z).log_marginal_likelihood() == pytest.approx(direct, rel=1e-8)
