import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import multivariate_normal

from scripts.linalg import (GaussianMixture, cholesky_sqrt, clamp_psd, gaussian_logpdf,
                            gaussian_logpdf_matrix, inv_spd, nearest_pd, symmetrize)
from scripts.utils import NotPositiveDefinite, make_rng

SPD = np.array([[4.0, 1.0], [1.0, 3.0]])


class TestFactorizations:
    def test_cholesky_reconstructs(self):
        L = cholesky_sqrt(SPD)
        assert_allclose(L @ L.T, SPD, atol=1e-12)
        assert np.allclose(L, np.tril(L))

    def test_cholesky_rejects_indefinite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky_sqrt(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_inverse_matches_numpy(self):
        assert_allclose(inv_spd(SPD), np.linalg.inv(SPD), rtol=1e-12)

    def test_batched_inverse(self):
        stack = np.stack([SPD, 2 * SPD, np.eye(2)])
        assert_allclose(inv_spd(stack), np.linalg.inv(stack), rtol=1e-12)

    def test_symmetrize(self):
        m = np.array([[1.0, 2.0], [0.0, 1.0]])
        assert_allclose(symmetrize(m), [[1.0, 1.0], [1.0, 1.0]])


class TestRepairs:
    def test_nearest_pd_keeps_pd_input(self):
        assert_allclose(nearest_pd(SPD), SPD)

    def test_nearest_pd_lifts_negative_eigenvalues(self):
        m = np.array([[1.0, 2.0], [2.0, 1.0]])
        vals = np.linalg.eigvalsh(nearest_pd(m, eig_floor=1e-3))
        assert vals.min() >= 1e-3 - 1e-12
        cholesky_sqrt(nearest_pd(m))

    def test_nearest_pd_batched_only_touches_bad_members(self):
        stack = np.stack([SPD, np.array([[1.0, 2.0], [2.0, 1.0]])])
        out = nearest_pd(stack)
        assert_allclose(out[0], SPD)
        assert np.linalg.eigvalsh(out[1]).min() > 0

    def test_nearest_pd_is_idempotent(self):
        once = nearest_pd(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert_allclose(nearest_pd(once), once)

    def test_clamp_psd(self):
        out = clamp_psd(np.array([[1.0, 0.0], [0.0, -1e-9]]))
        assert np.linalg.eigvalsh(out).min() >= 0
        assert_allclose(out, np.diag([1.0, 0.0]), atol=1e-12)


class TestGaussianDensities:
    def test_logpdf_matches_scipy(self):
        x = np.array([[0.5, -1.0], [2.0, 0.3]])
        mean = np.array([0.1, 0.2])
        assert_allclose(gaussian_logpdf(x, mean, SPD), multivariate_normal(mean, SPD).logpdf(x))

    def test_pairwise_shared_cov(self):
        rng = make_rng(0)
        x, means = rng.standard_normal((5, 2)), rng.standard_normal((3, 2))
        out = gaussian_logpdf_matrix(x, means, SPD)
        expected = np.array([[multivariate_normal(m, SPD).logpdf(xa) for m in means] for xa in x])
        assert_allclose(out, expected, rtol=1e-12)

    def test_pairwise_stacked_covs_and_chunks(self):
        rng = make_rng(1)
        x, means = rng.standard_normal((7, 2)), rng.standard_normal((3, 2))
        covs = np.stack([SPD, 2 * np.eye(2), np.diag([1.0, 5.0])])
        expected = np.array([[multivariate_normal(m, c).logpdf(xa) for m, c in zip(means, covs)]
                             for xa in x])
        assert_allclose(gaussian_logpdf_matrix(x, means, covs), expected, rtol=1e-12)
        assert_allclose(gaussian_logpdf_matrix(x, means, covs, chunk_elems=5), expected, rtol=1e-12)


class TestGaussianMixture:
    mix = GaussianMixture(np.array([0.25, 0.75]), np.array([[0.0], [4.0]]),
                          np.array([[[1.0]], [[2.0]]]))

    def test_moments(self):
        assert_allclose(self.mix.mean(), [3.0])
        # within + between component variance
        assert_allclose(self.mix.cov(), [[0.25 * 1 + 0.75 * 2 + 0.25 * 9 + 0.75 * 1]])

    def test_logpdf(self):
        x = np.array([[1.0]])
        expected = np.log(0.25 * multivariate_normal(0.0, 1.0).pdf(1.0)
                          + 0.75 * multivariate_normal(4.0, 2.0).pdf(1.0))
        assert_allclose(self.mix.logpdf(x), [expected])

    def test_sample_moments(self):
        draws = self.mix.sample(200_000, make_rng(5))
        assert abs(draws.mean() - 3.0) < 0.02
        assert abs(draws.var() - self.mix.cov()[0, 0]) < 0.08
