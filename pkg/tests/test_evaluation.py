import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad
from scipy.stats import norm

from scripts.evaluation import (GridDensity, ess, evaluate_on_grid, gaussian_on_grid, grid_axes,
                                histogram_pmf, jsd, reference_posterior, rmse_nees, step_errors)
from scripts.utils import GridMismatch, GridTooCoarse, make_rng

from .conftest import LINEAR_POST_MEAN, LINEAR_POST_VAR, toy


def gaussian_density(mu, axes):
    return evaluate_on_grid(lambda x: norm.logpdf(x[:, 0], mu, 1.0), axes)


class TestJsd:
    def test_bounds_and_symmetry(self):
        p = np.array([0.2, 0.3, 0.5, 0.0])
        q = np.array([0.0, 0.1, 0.1, 0.8])
        assert jsd(p, p) == pytest.approx(0.0, abs=1e-15)
        assert jsd([1, 0], [0, 1]) == pytest.approx(1.0)
        assert jsd(p, q) == pytest.approx(jsd(q, p))
        assert 0.0 < jsd(p, q) < 1.0

    def test_unnormalized_inputs(self):
        assert jsd([2.0, 2.0], [0.5, 0.5]) == pytest.approx(0.0, abs=1e-15)

    def test_size_mismatch(self):
        with pytest.raises(GridMismatch):
            jsd(np.ones(3), np.ones(4))

    def test_grid_mismatch(self):
        a = gaussian_density(0.0, grid_axes(-5, 5, 64))
        b = gaussian_density(0.0, grid_axes(-6, 6, 64))
        with pytest.raises(GridMismatch):
            jsd(a, b)

    def test_matches_continuous_divergence(self):
        axes = grid_axes(-9, 10, 2048)
        p, q = gaussian_density(0.0, axes), gaussian_density(1.0, axes)

        def integrand(x):
            a, b = norm.pdf(x, 0, 1), norm.pdf(x, 1, 1)
            m = 0.5 * (a + b)
            return 0.5 * (a * np.log2(a / m) + b * np.log2(b / m))
        expected, _ = quad(integrand, -15, 16, limit=200)
        assert jsd(p, q) == pytest.approx(expected, abs=1e-4)


def test_ess():
    assert ess(np.full(10, 0.1)) == pytest.approx(10)
    assert ess([1.0, 0.0, 0.0]) == pytest.approx(1)


class TestErrors:
    def test_fixed_offset(self):
        est, truth = np.zeros((3, 2)), np.ones((3, 2))
        cov = np.repeat(np.eye(2)[None], 3, axis=0)
        assert rmse_nees(est, cov, truth) == pytest.approx((np.sqrt(2), 1.0))
        assert rmse_nees(est, cov, truth, dims=[0]) == pytest.approx((1.0, 1.0))
        sq, nees = step_errors(est, 4 * cov, truth)
        assert_allclose(sq, 2.0)
        assert_allclose(nees, 0.25)

    def test_consistent_estimator_scores_one(self):
        rng = make_rng(0)
        A = rng.standard_normal((3, 3))
        cov = A @ A.T + np.eye(3)
        est = rng.standard_normal((20000, 3))
        truth = est + rng.standard_normal((20000, 3)) @ np.linalg.cholesky(cov).T
        _, nees = rmse_nees(est, np.repeat(cov[None], 20000, axis=0), truth)
        assert nees == pytest.approx(1.0, abs=0.03)


class TestReference:
    def test_linear_is_conjugate(self, linear_toy):
        model, _, y, prior = linear_toy
        ref = reference_posterior(model, prior, y)
        assert ref.mean()[0] == pytest.approx(LINEAR_POST_MEAN, rel=1e-3)
        assert ref.cov()[0, 0] == pytest.approx(LINEAR_POST_VAR, rel=1e-3)
        assert ref.integral() == pytest.approx(1.0, abs=1e-6)
        assert ref.mass() == pytest.approx(1.0, abs=1e-6)
        assert len(ref.axes[0]) == 2048

    def test_quadratic_posterior_is_bimodal(self):
        model, _, y, prior = toy('quadratic1d')
        assert reference_posterior(model, prior, y).local_maxima() == 2

    def test_node_values_follow_bayes_rule(self):
        model, _, y, prior = toy('banana2d-case1')
        ref = reference_posterior(model, prior, y)
        assert ref.values.shape == (256, 256)
        x = ref.mesh()
        logv = np.log(ref.values.ravel())
        direct = model.log_likelihood(y, x) + prior.logpdf(x)
        ok = ref.values.ravel() > 1e-200
        shift = logv[ok] - direct[ok]
        assert np.ptp(shift) < 1e-10 * max(1.0, np.abs(shift).max())

    def test_flat_density_is_rejected(self, linear_toy):
        model, _, y, prior = linear_toy
        with pytest.raises(GridTooCoarse):
            reference_posterior(model, prior, y, log_density=lambda x: np.zeros(len(x)))
        with pytest.raises(GridTooCoarse):
            evaluate_on_grid(lambda x: np.full(len(x), -np.inf), grid_axes(0, 1, 8))

    def test_gaussian_on_grid_recovers_reference(self, linear_toy):
        model, _, y, prior = linear_toy
        ref = reference_posterior(model, prior, y, points=512)
        dens = gaussian_on_grid([LINEAR_POST_MEAN], [[LINEAR_POST_VAR]], ref)
        assert jsd(dens.pmf(), ref.pmf()) < 1e-8


class TestHistogram:
    @pytest.fixture
    def reference(self, linear_toy):
        model, _, y, prior = linear_toy
        return reference_posterior(model, prior, y, points=512)

    def test_rebin(self, reference):
        assert reference.rebin(64).shape == (65,)
        assert reference.rebin(64).sum() == pytest.approx(reference.pmf().sum())
        assert_allclose(reference.rebin(512), reference.pmf())
        with pytest.raises(GridMismatch):
            reference.rebin(100)

    def test_off_grid_mass_goes_to_overflow(self, reference):
        pmf = histogram_pmf(np.array([[1e4], [LINEAR_POST_MEAN]]), np.array([0.3, 0.7]), reference, 64)
        assert pmf[-1] == pytest.approx(0.3)
        assert pmf.sum() == pytest.approx(1.0)

    def test_posterior_samples_match_reference(self, reference):
        rng = make_rng(1)
        samples = rng.normal(LINEAR_POST_MEAN, np.sqrt(LINEAR_POST_VAR), (200_000, 1))
        pmf = histogram_pmf(samples, np.ones(len(samples)), reference, 64)
        assert jsd(pmf, reference.rebin(64)) < 1e-3

    def test_two_dimensional_bins(self):
        axes = grid_axes([-3, -3], [3, 3], 64)
        ref = GridDensity(axes, np.ones((64, 64)) / 36.0)
        pmf = histogram_pmf(np.zeros((5, 2)), np.ones(5), ref, 16)
        assert pmf.shape == (16 * 16 + 1,)
        assert pmf.max() == pytest.approx(1.0)
