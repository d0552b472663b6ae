"""
Comparison filters: EKF and UKF (serial PDA updates per sensor), the bootstrap
particle filter and the marginal particle filters MBPF / MEPF / MUPF / MAPF.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .linalg import cholesky_sqrt, gaussian_logpdf, gaussian_logpdf_matrix, inv_spd, nearest_pd, symmetrize
from .spf_gs import inverse_cdf_indices, normalize_log_weights
from .spf_mpf import empirical_target_log_density
from .utils import NotPositiveDefinite

logger = logging.getLogger(__name__)

MARGINAL_VARIANTS = ('mbpf', 'mepf', 'mupf', 'mapf')


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = symmetrize(np.atleast_2d(np.asarray(self.cov, dtype=float)))


@dataclass
class ParticleCloud:
    particles: np.ndarray
    weights: np.ndarray
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.particles)

    @classmethod
    def from_prior(cls, prior, n_particles, rng):
        L = cholesky_sqrt(prior.cov)
        particles = prior.mean + rng.standard_normal((n_particles, prior.dim)) @ L.T
        return cls(particles, np.full(n_particles, 1.0 / n_particles))

    def ess(self):
        return 1.0 / np.sum(self.weights ** 2)

    def mean(self):
        return self.weights @ self.particles

    def cov(self):
        diff = self.particles - self.mean()
        return np.einsum('i,ij,ik->jk', self.weights, diff, diff)


def _repaired(cov):
    """Symmetric PD covariance; nearest-PD repair when the factorization fails."""
    cov = symmetrize(cov)
    try:
        cholesky_sqrt(cov)
        return cov
    except NotPositiveDefinite:
        logger.debug('Repairing a covariance that lost positive definiteness')
        cov = nearest_pd(cov)
        cholesky_sqrt(cov)
        return cov


# Linearizers: (block, mean, cov) -> predicted measurement, its covariance
# without R, and the state-measurement cross covariance.

def ekf_linearizer(block, mean, cov):
    J = block.jacobian(mean)
    return block.observe(mean), J @ cov @ J.T, cov @ J.T


@dataclass
class UnscentedTransform:
    """Scaled sigma points with alpha, beta, kappa."""
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    def points(self, mean, cov):
        n = len(mean)
        lam = self.alpha ** 2 * (n + self.kappa) - n
        L = cholesky_sqrt(nearest_pd((n + lam) * cov))
        sigmas = np.vstack([mean, mean + L.T, mean - L.T])
        wm = np.full(2 * n + 1, 0.5 / (n + lam))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + 1 - self.alpha ** 2 + self.beta
        return sigmas, wm, wc

    def __call__(self, block, mean, cov):
        sigmas, wm, wc = self.points(mean, cov)
        Y = np.atleast_2d(block.observe(sigmas))
        # residuals around the central point keep periodic measurements unwrapped
        dy = block.residual(Y, Y[0])
        yhat = Y[0] + wm @ dy
        dy = block.residual(Y, yhat)
        dx = sigmas - mean
        return yhat, np.einsum('i,ij,ik->jk', wc, dy, dy), np.einsum('i,ij,ik->jk', wc, dx, dy)


def block_update(belief, block, linearizer):
    """
    PDA measurement update of one sensor block.

    beta_0 is proportional to lambda_c (1 - P_d) and beta_i to P_d N(nu_i; 0, S).
    A single detection with P_d = 1 and no clutter reduces to the Kalman update.
    """
    yhat, S0, Pxy = linearizer(block, belief.mean, belief.cov)
    S = symmetrize(S0 + block.obs_cov)
    dets = np.atleast_2d(block.detections)
    if dets.size == 0:
        return belief
    nu = block.residual(dets, yhat)
    with np.errstate(divide='ignore'):
        log_miss = np.log(block.clutter_density * (1 - block.detection_prob))
        log_hit = np.log(block.detection_prob) + gaussian_logpdf(nu, np.zeros(len(yhat)), S)
    logb = np.concatenate([[log_miss], np.atleast_1d(log_hit)])
    if not np.isfinite(logsumexp(logb)):
        return belief
    beta = np.exp(logb - logsumexp(logb))
    K = Pxy @ inv_spd(S)
    nu_bar = beta[1:] @ nu
    spread = np.einsum('i,ij,ik->jk', beta[1:], nu, nu) - np.outer(nu_bar, nu_bar)
    mean = belief.mean + K @ nu_bar
    cov = belief.cov - (1 - beta[0]) * K @ S @ K.T + K @ spread @ K.T
    return GaussianBelief(mean, _repaired(cov))


def ekf_predict(belief, model):
    F = model.transition_jacobian(belief.mean)
    cov = F @ belief.cov @ F.T + model.transition_cov(belief.mean)
    return GaussianBelief(model.transition_mean(belief.mean), _repaired(cov))


def ukf_predict(belief, model, transform):
    sigmas, wm, wc = transform.points(belief.mean, belief.cov)
    X = model.transition_mean(sigmas)
    mean = wm @ X
    dx = X - mean
    cov = np.einsum('i,ij,ik->jk', wc, dx, dx) + model.transition_cov(belief.mean)
    return GaussianBelief(mean, _repaired(cov))


def ekf_step(belief, y, model):
    """EKF cycle; multi-sensor observations are applied serially, one block per sensor."""
    belief = ekf_predict(belief, model)
    for block in model.measurement_blocks(y):
        belief = block_update(belief, block, ekf_linearizer)
    return belief


def ukf_step(belief, y, model, transform=None):
    transform = transform or UnscentedTransform()
    belief = ukf_predict(belief, model, transform)
    for block in model.measurement_blocks(y):
        belief = block_update(belief, block, transform)
    return belief


def systematic_resample(weights, rng):
    N = len(weights)
    positions = (rng.random() + np.arange(N)) / N
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, positions, side='right'), N - 1)


def bootstrap_pf_step(cloud, y, model, rng, ess_threshold=0.5):
    """
    Propagate through the transition, weight by the likelihood and resample
    systematically when ESS < ess_threshold * N.

    Raises:
        AllWeightsZero
    """
    x = model.sample_transition(cloud.particles, rng)
    with np.errstate(divide='ignore'):
        logw = np.log(cloud.weights) + model.log_likelihood(y, x)
    weights = normalize_log_weights(logw)
    out = ParticleCloud(x, weights)
    ess = out.ess()
    out.info = dict(ess=ess, resampled=False)
    N = len(out)
    if ess < ess_threshold * N:
        idx = systematic_resample(weights, rng)
        out = ParticleCloud(x[idx], np.full(N, 1.0 / N), dict(ess=ess, resampled=True))
    return out


def _gaussian_components(model, y, means, covs, variant, transform, iterations=10):
    """
    Locally updated Gaussian components N(mean_i, cov_i) and the predictive
    log-likelihood log N(y; h(mean_i), J cov_i J^T + R) of every prior component.
    """
    R = model.obs_cov
    out_means = np.empty_like(means)
    out_covs = np.empty_like(covs)
    log_pred = np.empty(len(means))
    zero = np.zeros(model.dim_y)
    for i, (m, P) in enumerate(zip(means, covs)):
        if variant == 'mupf':
            block = model.measurement_blocks(y)[0]
            yhat, S0, Pxy = transform(block, m, P)
        else:
            yhat = model.observe(m)
            J = model.observe_jacobian(m)
            S0, Pxy = J @ P @ J.T, P @ J.T
        S = symmetrize(S0 + R)
        nu = model.innovation(y, yhat)
        log_pred[i] = gaussian_logpdf(nu, zero, S)
        K = Pxy @ inv_spd(S)
        mean = m + K @ nu
        cov = P - K @ S @ K.T
        if variant == 'mapf':
            # iterated update; a fixed point after one pass when h is linear
            x = mean
            for _ in range(iterations):
                J = model.observe_jacobian(x)
                S = symmetrize(J @ P @ J.T + R)
                K = P @ J.T @ inv_spd(S)
                x_new = m + K @ (model.innovation(y, model.observe(x)) - J @ (m - x))
                if np.allclose(x_new, x, rtol=1e-12, atol=1e-12):
                    x = x_new
                    break
                x = x_new
            mean, cov = x, P - K @ S @ K.T
        out_means[i] = mean
        out_covs[i] = _repaired(cov)
    return out_means, out_covs, log_pred


def marginal_pf_step(cloud, y, model, variant, rng, transform=None):
    """
    Marginal particle filter: sample from sum_i w_q,i q_i(x), weight against the
    empirical marginal target p(y|x) sum_j w_j p(x | x_j).

    mbpf: q_i is the transition density, w_q = w.
    mepf / mupf: q_i is the EKF / UKF update of the transition density,
        w_q proportional to w N(y; h(f(x_i)), J Q J^T + R).
    mapf: q_i is the iterated-EKF local posterior (exact for linear h), same w_q.

    Raises:
        AllWeightsZero
    """
    variant = variant.lower()
    if variant not in MARGINAL_VARIANTS:
        raise ValueError(f'Unknown marginal filter {variant!r}, expected one of {MARGINAL_VARIANTS}')
    if variant != 'mbpf' and not model.gaussian_likelihood:
        raise ValueError(f'{variant.upper()} requires an additive Gaussian likelihood')
    prev = cloud.particles
    means = model.transition_mean(prev)
    covs = np.broadcast_to(model.transition_cov(prev), means.shape + (means.shape[-1],)).copy()
    with np.errstate(divide='ignore'):
        log_wq = np.log(cloud.weights)
    if variant != 'mbpf':
        means, covs, log_pred = _gaussian_components(model, y, means, covs, variant,
                                                     transform or UnscentedTransform())
        log_wq = log_wq + log_pred
    wq = normalize_log_weights(log_wq)

    N = len(cloud)
    idx = inverse_cdf_indices(wq, rng)
    L = cholesky_sqrt(covs[idx])
    x = means[idx] + np.einsum('ijk,ik->ij', L, rng.standard_normal((N, prev.shape[-1])))
    with np.errstate(divide='ignore'):
        log_q = logsumexp(gaussian_logpdf_matrix(x, means, covs) + np.log(wq), axis=1)
    log_t = empirical_target_log_density(x, prev, cloud.weights, model, y)
    weights = normalize_log_weights(np.where(np.isfinite(log_t), log_t - log_q, -np.inf))
    out = ParticleCloud(x, weights)
    out.info = dict(ess=out.ess())
    return out
