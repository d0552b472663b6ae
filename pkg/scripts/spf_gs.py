"""
Stochastic-particle-flow Gaussian sum filter.

Every particle carries a companion Gaussian mixand. Particles follow the
Langevin flow towards their local posterior p(y|x) p_i(x); the mixand moments
follow the flow linearized at the particle, so the weighted mixands form the
filtering density.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .flow import (FlowConfig, FlowContext, curvature_metric, discretize_affine, estimate_bounds,
                   integrate_step, schedule)
from .linalg import (LOG_2PI, GaussianMixture, cholesky_sqrt, clamp_psd, gaussian_logpdf,
                     inv_spd, nearest_pd, symmetrize)
from .models import GaussianPrior, MixtureLikelihoodModel
from .utils import AllWeightsZero, MapSearchDiverged

logger = logging.getLogger(__name__)


@dataclass
class GsCloud:
    """
    Particles with their companion mixands.

    particles (N, n), weights (N,) mixand weights, means (N, n), covs (N, n, n).
    `info` holds diagnostics of the last cycle (schedule, ENM, resampling).
    """
    particles: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.particles)
        if not (len(self.weights) == len(self.means) == len(self.covs) == n):
            raise ValueError('Particles and mixands must have the same count')

    def __len__(self):
        return len(self.particles)

    @property
    def dim(self):
        return self.particles.shape[-1]

    @classmethod
    def from_prior(cls, prior, n_particles, rng):
        """Particles drawn from the prior; every mixand starts at the prior moments."""
        L = cholesky_sqrt(prior.cov)
        particles = prior.mean + rng.standard_normal((n_particles, prior.dim)) @ L.T
        return cls(particles=particles,
                   weights=np.full(n_particles, 1.0 / n_particles),
                   means=np.repeat(prior.mean[None], n_particles, axis=0),
                   covs=np.repeat(prior.cov[None], n_particles, axis=0))

    def mixture(self):
        return GaussianMixture(self.weights, self.means, self.covs)

    def enm(self):
        return 1.0 / np.sum(self.weights ** 2)

    def mean(self):
        return self.weights @ self.means

    def cov(self):
        return self.mixture().cov()


def predicted_components(model, cloud):
    """Local predicted densities p_i(x | y_1:k-1) of every mixand."""
    means, covs = model.predict_components(cloud.means, cloud.covs)
    return GaussianPrior(means, covs)


def global_prior(cloud, local):
    """Single Gaussian matching the moments of the weighted predicted components."""
    mix = GaussianMixture(cloud.weights, local.mean, local.cov)
    return GaussianPrior(mix.mean(), mix.cov())


def cycle_schedule(model, y, prior, samples, config):
    """
    Flow schedule of one filtering cycle, from the bounds of the posterior built
    on `prior` (a single Gaussian) evaluated around the given samples.
    """
    ctx = FlowContext.from_posterior(model, prior, y)
    try:
        bounds = estimate_bounds(ctx, samples, m_min_ratio=config.m_min_ratio,
                                 M_max=config.M_max, max_iter=config.map_max_iter)
    except MapSearchDiverged as err:
        logger.warning('%s; expanding around the prior mean', err)
        bounds = estimate_bounds(ctx, samples, x_map=prior.mean,
                                 m_min_ratio=config.m_min_ratio, M_max=config.M_max)
    sched = schedule(bounds.m, bounds.M, prior.dim, config.epsilon, config.l_cap, config.dlam_max)
    logger.debug('Schedule m=%.3g M=%.3g T=%.3g dlam=%.3g L=%d%s', sched.m, sched.M, sched.T,
                 sched.dlam, sched.L, f' (capped, horizon {sched.horizon:.3g})' if sched.capped else '')
    return sched


def bimodal_mode_assignment(cloud, mode_weights, rng):
    """Mode index of every particle, drawn with the mode weights."""
    mode_weights = np.asarray(mode_weights, dtype=float)
    if not np.isclose(mode_weights.sum(), 1.0):
        raise ValueError('Mode weights must sum to 1')
    return rng.choice(len(mode_weights), size=len(cloud), p=mode_weights / mode_weights.sum())


def _target_problems(model, y, modes):
    """(sub-model, observation, particle indices) triples the cloud is split into."""
    if modes is None:
        return [(model, y, slice(None))]
    return [(*model.mode_problem(j, y), np.flatnonzero(modes == j)) for j in range(model.n_modes)]


def split_priors(problems, local):
    """Per-group slices of the per-particle priors, aligned with `problems`."""
    return [GaussianPrior(local.mean[idx], local.cov[idx]) for _, _, idx in problems]


def cloud_parts(problems, priors, x):
    """
    Log target, gradient, Hessian and PSD information of every particle's local
    posterior; `priors` holds the per-particle Gaussians of each group.
    """
    N, n = x.shape
    lp = np.empty(N)
    g = np.empty((N, n))
    H = np.empty((N, n, n))
    info = np.empty((N, n, n))
    for (sub, y_sub, idx), pr in zip(problems, priors):
        xs = x[idx]
        if len(xs) == 0:
            continue
        ll, gl, Hl, il = sub.likelihood_parts(y_sub, xs)
        lp[idx] = ll + pr.logpdf(xs)
        g[idx] = gl + pr.grad(xs)
        H[idx] = Hl + pr.hess(xs)
        info[idx] = (-Hl if il is None else il) + pr.precision
    return lp, g, H, info


def _linearize(d, information, g, x):
    """Linear drift C x + c touching 1/2 d g at x, with C = -1/2 d (P^-1 + I_lik)."""
    C = -0.5 * d @ information
    c = 0.5 * np.einsum('...ij,...j->...i', d, g) - np.einsum('...ij,...j->...i', C, x)
    return C, c


def local_linearization(x_l, d, model, prior, y):
    """
    Linearized flow drift C x + c at x_l for the posterior p(y|x) N(x; prior).

    C = -1/2 d P^-1 - 1/2 d I(x_l), with I the likelihood information (J^T R^-1 J
    for additive Gaussian observations), and c such that C x_l + c equals the
    drift 1/2 d grad log pi(x_l).
    """
    x_l = np.asarray(x_l, dtype=float)
    ll, gl, Hl, il = model.likelihood_parts(y, x_l)
    information = (-Hl if il is None else il) + prior.precision
    return _linearize(np.asarray(d, dtype=float), information, gl + prior.grad(x_l), x_l)


def propagate_moments(mean, cov, C, c, d, dlam):
    """
    Exact solution over dlam of dmu = (C mu + c) dl, dSigma = (C Sigma + Sigma C^T + d) dl
    with constant coefficients. Works on stacks; the result is symmetrized and
    clamped to PSD.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = mean.shape[-1]
    if n == 1:
        z = C[..., 0, 0] * dlam
        phi = np.exp(z)
        small = np.abs(z) < 1e-12
        safe = np.where(small, 1.0, z)
        int1 = dlam * np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)
        int2 = dlam * np.where(small, 1.0 + z, np.expm1(2 * safe) / (2 * safe))
        new_mean = phi[..., None] * mean + int1[..., None] * c
        new_cov = (phi ** 2)[..., None, None] * cov + int2[..., None, None] * d
        return new_mean, clamp_psd(new_cov)

    Phi, b, noise = discretize_affine(C, c, d, dlam)
    new_mean = np.einsum('...ij,...j->...i', Phi, mean) + b
    new_cov = Phi @ cov @ np.swapaxes(Phi, -1, -2) + noise
    return new_mean, clamp_psd(new_cov)


def log_evidence(model, y, local, means=None, covs=None, idx=slice(None)):
    """
    log of the integral of p(y|x) p_i(x) for the mixands in `idx`.

    Additive Gaussian likelihoods: N(y; h(mu_i), J P_i J^T + R) with J at mu_i.
    Where h is not differentiable at mu_i (the origin of a range-bearing sensor)
    it is linearized at the flowed mixand mean m_i instead, h(m_i) + J(m_i)(mu_i - m_i).
    Other likelihoods: Laplace estimate at the flowed mixand (means, covs).
    """
    mu, P = local.mean[idx], local.cov[idx]
    if model.gaussian_likelihood:
        with np.errstate(divide='ignore', invalid='ignore'):
            J = np.array(model.observe_jacobian(mu), dtype=float)
            h = np.array(model.observe(mu), dtype=float)
        bad = ~(np.all(np.isfinite(J), axis=(-2, -1)) & np.all(np.isfinite(h), axis=-1))
        if np.any(bad) and means is not None:
            m = means[idx][bad]
            J[bad] = model.observe_jacobian(m)
            h[bad] = model.observe(m) + np.einsum('kij,kj->ki', J[bad], mu[bad] - m)
            logger.debug('Evidence of %d mixands linearized at the flowed mean', np.sum(bad))
        S = symmetrize(J @ P @ np.swapaxes(J, -1, -2) + model.obs_cov)
        nu = model.innovation(y, h)
        return gaussian_logpdf(nu, np.zeros(model.dim_y), S)
    m, S = means[idx], nearest_pd(covs[idx])
    n = m.shape[-1]
    _, logdet = np.linalg.slogdet(S)
    return model.log_likelihood(y, m) + gaussian_logpdf(m, mu, P) + 0.5 * (n * LOG_2PI + logdet)


def normalize_log_weights(logw):
    total = logsumexp(logw)
    if not np.isfinite(total):
        raise AllWeightsZero('Every mixture weight underflowed: the filter diverged')
    return np.exp(logw - total)


def mixture_weight_update(cloud, model, local, y, means=None, covs=None, modes=None):
    """
    Normalized weights w_i proportional to w_i(k-1) times the evidence of y under
    the i-th predicted component. With `modes`, each mixand is scored by the mode
    its particle flowed towards.

    Raises:
        AllWeightsZero: every evidence underflowed.
    """
    with np.errstate(divide='ignore'):
        logw = np.log(cloud.weights)
    log_z = np.empty(len(cloud))
    for sub, y_sub, idx in _target_problems(model, y, modes):
        if isinstance(idx, np.ndarray) and len(idx) == 0:
            continue
        log_z[idx] = log_evidence(sub, y_sub, local, means, covs, idx)
    return normalize_log_weights(logw + log_z)


def inverse_cdf_indices(weights, rng, size=None):
    """Multinomial draws: each u in (0, 1] selects j with u in (c(j-1), c(j)]."""
    N = len(weights)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    u = 1.0 - rng.random(N if size is None else size)
    return np.minimum(np.searchsorted(cdf, u, side='left'), N - 1)


def resample(cloud, rng):
    """
    Multinomial resampling on the mixand weights. Particles and mixands are
    copied jointly; weights reset to 1/N.
    """
    N = len(cloud)
    idx = inverse_cdf_indices(cloud.weights, rng)
    return GsCloud(particles=cloud.particles[idx], weights=np.full(N, 1.0 / N),
                   means=cloud.means[idx], covs=cloud.covs[idx], info=dict(cloud.info))


def flow_cloud(cloud, model, y, local, sched, config, rng, modes=None):
    """
    Run the particles and mixand moments through the schedule.

    Particles start at x_{k-1}; mixand means at mu_{m,k-1} and covariances at 0.

    Returns:
        particles, means, covs at the end of the pseudo-time horizon
    """
    problems = _target_problems(model, y, modes)
    priors = split_priors(problems, local)
    x = np.array(cloud.particles, dtype=float)
    means = np.array(cloud.means, dtype=float)
    covs = np.zeros_like(cloud.covs)

    def parts(z):
        return cloud_parts(problems, priors, z)

    ctx = FlowContext.from_parts(parts, cloud.dim)
    d_frozen = None
    if config.frozen_d:
        center = np.repeat((cloud.weights @ x)[None], len(x), axis=0)
        _, _, Hc, ic = parts(center)
        d_frozen = inv_spd(curvature_metric(-Hc, ic, config.eig_floor))
    for _ in range(sched.L):
        _, g, H, info = parts(x)
        metric = curvature_metric(-H, info, config.eig_floor)
        d = inv_spd(metric) if d_frozen is None else d_frozen
        C, c = _linearize(d, info, g, x)
        means, covs = propagate_moments(means, covs, C, c, d, sched.dlam)
        noise = rng.standard_normal(x.shape)
        x = integrate_step(ctx, x, d, sched.dlam, noise, config.method,
                           grad=g, metric=metric, floor=config.eig_floor)
    return x, means, covs


def local_priors(model, cloud, prior=None, prior_mode='local'):
    """
    Per-particle flow priors and the single Gaussian used for the schedule.

    An explicit `prior` is shared by every particle. Otherwise each particle uses
    its predicted component, or the moment-matched global prediction when
    `prior_mode` is 'global'.
    """
    N = len(cloud)
    if prior is not None:
        shared = prior
    else:
        local = predicted_components(model, cloud)
        shared = global_prior(cloud, local)
        if prior_mode == 'local':
            return local, shared
    return GaussianPrior(np.broadcast_to(shared.mean, (N, shared.dim)),
                         np.broadcast_to(shared.cov, (N, shared.dim, shared.dim))), shared


def flow_cycle(cloud, y, model, prior, config, rng):
    """
    Schedule, flow and mixand weights shared by both flow filters.

    Returns:
        particles, mixand weights, means, covs, diagnostics dict
    """
    if config.aux_flow:
        raise NotImplementedError('The auxiliary prior-targeted flow for mixture weights is not available')
    local, shared = local_priors(model, cloud, prior, config.prior_mode)
    sched = cycle_schedule(model, y, shared, cloud.particles, config)
    modes = None
    if isinstance(model, MixtureLikelihoodModel):
        modes = bimodal_mode_assignment(cloud, model.mode_weights, rng)
    x, means, covs = flow_cloud(cloud, model, y, local, sched, config, rng, modes)
    weights = mixture_weight_update(cloud, model, local, y, means, covs, modes)
    return x, weights, means, covs, dict(schedule=sched, local=local, modes=modes)


def spf_gs_step(cloud, y, model, prior=None, config=None, rng=None):
    """
    One filtering cycle of the Gaussian sum filter.

    Parameters:
        cloud (GsCloud): filtering density at k-1.
        y: observation at k.
        model (StateSpaceModel): transition and likelihood.
        prior (GaussianPrior, optional): shared predicted prior for every particle;
            the per-mixand predicted components are used otherwise.
        config (FlowConfig): flow and resampling options.
        rng (np.random.Generator): noise source.

    Returns:
        GsCloud at k, with `info` holding the schedule, ENM and resampling flag.
    """
    config = config or FlowConfig()
    N = len(cloud)
    x, weights, means, covs, extra = flow_cycle(cloud, y, model, prior, config, rng)
    out = GsCloud(particles=x, weights=weights, means=means, covs=covs)
    enm = out.enm()
    out.info = dict(extra, enm=enm, resampled=False)
    if config.resample and enm < config.enm_threshold * N:
        logger.debug('ENM %.1f below %.1f; resampling', enm, config.enm_threshold * N)
        out = resample(out, rng)
        out.info['resampled'] = True
    return out
