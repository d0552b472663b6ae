"""
Stochastic-particle-flow marginal particle filter.

The flowed mixture is used as an importance proposal against the empirical
marginal target p(y|x) sum_j w_j p(x | x_j); the flowed particles are the
importance samples.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .flow import FlowConfig
from .linalg import gaussian_logpdf_matrix, nearest_pd
from .spf_gs import GsCloud, flow_cycle, inverse_cdf_indices, normalize_log_weights
from .utils import Underflow

logger = logging.getLogger(__name__)


@dataclass
class MpfCloud(GsCloud):
    """GsCloud plus importance weights (N,), normalized independently of the mixand weights."""
    importance: Optional[np.ndarray] = None

    def __post_init__(self):
        super().__post_init__()
        if self.importance is None:
            self.importance = np.full(len(self.particles), 1.0 / len(self.particles))
        elif len(self.importance) != len(self.particles):
            raise ValueError('One importance weight per particle expected')

    @classmethod
    def from_prior(cls, prior, n_particles, rng):
        gs = GsCloud.from_prior(prior, n_particles, rng)
        return cls(particles=gs.particles, weights=gs.weights, means=gs.means, covs=gs.covs)

    def ess(self):
        return 1.0 / np.sum(self.importance ** 2)

    def mean(self):
        return self.importance @ self.particles

    def cov(self):
        diff = self.particles - self.mean()
        return np.einsum('i,ij,ik->jk', self.importance, diff, diff)


def _log(w):
    with np.errstate(divide='ignore'):
        return np.log(w)


def empirical_target_log_density(x, prev_particles, prev_weights, model, y):
    """
    Unnormalized log of p(y|x) sum_j w_j p(x | x_j) over the previous weighted particles.

    Raises:
        Underflow: every evaluation point has zero target density.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    trans = model.transition_logpdf_matrix(x, prev_particles) + _log(prev_weights)
    out = model.log_likelihood(y, x) + logsumexp(trans, axis=1)
    if not np.any(np.isfinite(out)):
        raise Underflow('Empirical target underflowed at every evaluation point')
    return out


def proposal_log_density(x, cloud, prev, model, local, simple=False):
    """
    log q(x) of the flow-built mixture proposal.

    q(x) = sum_i w_q,i(x) N(x; mu_i, Sigma_i) with
    w~_q,i(x) = w_i(k-1) w_m,i p(x | x_i(k-1)) / p_i(x) normalized over i at every x.
    With `simple`, q is the plain mixture sum_i w_m,i N(x; mu_i, Sigma_i).

    Raises:
        Underflow: every evaluation point has zero proposal density.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    comp = gaussian_logpdf_matrix(x, cloud.means, nearest_pd(cloud.covs))
    if simple:
        out = logsumexp(comp + _log(cloud.weights), axis=1)
    else:
        log_wq = (_log(prev.importance) + _log(cloud.weights)
                  + model.transition_logpdf_matrix(x, prev.particles)
                  - gaussian_logpdf_matrix(x, local.mean, local.cov))
        with np.errstate(invalid='ignore'):
            out = logsumexp(log_wq + comp, axis=1) - logsumexp(log_wq, axis=1)
    if not np.any(np.isfinite(out)):
        raise Underflow('Proposal density underflowed at every evaluation point')
    return out


def importance_weights(x, cloud, prev, model, y, local, simple=False):
    """
    Normalized marginal importance weights target(x_i) / q(x_i), in log space.

    Raises:
        Underflow / AllWeightsZero
    """
    log_t = empirical_target_log_density(x, prev.particles, prev.importance, model, y)
    log_q = proposal_log_density(x, cloud, prev, model, local, simple=simple)
    if np.any(~np.isfinite(log_q) & np.isfinite(log_t)):
        raise Underflow('Proposal vanishes where the target does not')
    with np.errstate(invalid='ignore'):
        logw = np.where(np.isfinite(log_t), log_t - log_q, -np.inf)
    return normalize_log_weights(logw)


def resample(cloud, rng):
    """
    Multinomial resampling of the joint record (particle, importance weight,
    mixand) on the importance weights; importance weights reset to 1/N and the
    surviving mixand weights are renormalized.
    """
    N = len(cloud)
    idx = inverse_cdf_indices(cloud.importance, rng)
    weights = cloud.weights[idx]
    total = weights.sum()
    weights = weights / total if total > 0 else np.full(N, 1.0 / N)
    return MpfCloud(particles=cloud.particles[idx], weights=weights, means=cloud.means[idx],
                    covs=cloud.covs[idx], info=dict(cloud.info), importance=np.full(N, 1.0 / N))


def spf_mpf_step(cloud, y, model, prior=None, config=None, rng=None):
    """
    One filtering cycle of the marginal particle filter.

    Runs the same flow as the Gaussian sum filter, then weights every flowed
    particle by the empirical marginal target over the mixture proposal.
    Resamples when ESS < ess_threshold * N.

    Returns:
        MpfCloud at k; `info` holds the schedule, ESS, ENM and resampling flag.
    """
    config = config or FlowConfig()
    N = len(cloud)
    x, weights, means, covs, extra = flow_cycle(cloud, y, model, prior, config, rng)
    flowed = GsCloud(particles=x, weights=weights, means=means, covs=covs)
    importance = importance_weights(x, flowed, cloud, model, y, extra['local'],
                                    simple=config.simple_proposal)
    out = MpfCloud(particles=x, weights=weights, means=means, covs=covs, importance=importance)
    ess = out.ess()
    out.info = dict(extra, ess=ess, enm=out.enm(), resampled=False)
    if config.resample and ess < config.ess_threshold * N:
        logger.debug('ESS %.1f below %.1f; resampling', ess, config.ess_threshold * N)
        out = resample(out, rng)
        out.info['resampled'] = True
    return out
