"""
State-space models and the toy problems used to score the filters.

Every model works on batches: states have shape (..., dim_x) and the derivative
methods return matching (..., dim_x) gradients and (..., dim_x, dim_x)
Hessians, so a particle cloud is evaluated in one call.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .linalg import (cholesky_sqrt, gaussian_logpdf, gaussian_logpdf_matrix,
                     inv_spd, symmetrize)
from .utils import make_rng, wrap_angle

logger = logging.getLogger(__name__)


@dataclass
class GaussianPrior:
    """N(mean, cov); both may carry leading batch axes (one prior per particle)."""
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = symmetrize(np.atleast_2d(np.asarray(self.cov, dtype=float)))

    @property
    def dim(self):
        return self.mean.shape[-1]

    @cached_property
    def precision(self):
        return inv_spd(self.cov)

    def logpdf(self, x):
        return gaussian_logpdf(x, self.mean, self.cov)

    def grad(self, x):
        return -np.einsum('...ij,...j->...i', self.precision, x - self.mean)

    def hess(self, x):
        shape = np.broadcast_shapes(np.shape(x)[:-1], self.precision.shape[:-2])
        return -np.broadcast_to(self.precision, shape + self.precision.shape[-2:])


@dataclass
class MeasurementBlock:
    """One sensor's contribution, consumed by the serial EKF/UKF updates."""
    observe: Callable
    jacobian: Callable
    obs_cov: np.ndarray
    detections: np.ndarray
    detection_prob: float = 1.0
    clutter_density: float = 0.0
    residual: Callable = field(default=lambda y, yhat: y - yhat)


def mixture_log_derivatives(logterms, grads, hessians, infos=None, diagonal=False):
    """
    Value, gradient and Hessian of log sum_k exp(a_k(x)).

    With p_k the softmax of the terms: g = sum p_k g_k and
    H = sum p_k (H_k + g_k g_k^T) - g g^T. `infos` are per-term PSD curvature
    surrogates averaged the same way. With `diagonal`, `hessians` and `infos`
    hold only diagonals of shape (..., K, n).

    Returns:
        (log value, gradient, Hessian, information)
    """
    ll = logsumexp(logterms, axis=-1)
    finite = np.isfinite(ll)
    with np.errstate(invalid='ignore'):
        p = np.exp(logterms - np.where(finite, ll, 0.0)[..., None])
    p = np.where(finite[..., None], p, 0.0)
    g = np.einsum('...k,...ki->...i', p, grads)
    second = np.einsum('...k,...ki,...kj->...ij', p, grads, grads, optimize=True)
    if diagonal:
        hbar = _diag_embed(np.einsum('...k,...ki->...i', p, hessians))
    else:
        hbar = np.einsum('...k,...kij->...ij', p, hessians)
    H = symmetrize(hbar + second - g[..., :, None] * g[..., None, :])
    info = None
    if infos is not None:
        if diagonal:
            info = _diag_embed(np.einsum('...k,...ki->...i', p, infos))
        else:
            info = np.einsum('...k,...kij->...ij', p, infos)
    return ll, g, H, info


def _diag_embed(d):
    out = np.zeros(d.shape + (d.shape[-1],))
    idx = np.arange(d.shape[-1])
    out[..., idx, idx] = d
    return out


class StateSpaceModel:
    """
    Base class: Gaussian transition x_k = f(x_{k-1}) + q_k, q_k ~ N(0, Q) and,
    unless `gaussian_likelihood` is False, additive Gaussian observations
    y_k = h(x_k) + r_k, r_k ~ N(0, R).
    """
    name = 'model'
    dim_x = 1
    dim_y = 1
    gaussian_likelihood = True
    constant_transition_cov = True
    initial: Optional[GaussianPrior] = None

    # transition
    def transition_mean(self, x):
        raise NotImplementedError

    def transition_jacobian(self, x):
        raise NotImplementedError

    def transition_cov(self, x=None):
        raise NotImplementedError

    def predict_components(self, means, covs):
        """Gaussian predicted components: f(mu), F Sigma F^T + Q, F taken at mu."""
        F = self.transition_jacobian(means)
        pred_cov = F @ covs @ np.swapaxes(F, -1, -2) + self.transition_cov(means)
        return self.transition_mean(means), symmetrize(pred_cov)

    def sample_transition(self, x, rng):
        x = np.asarray(x, dtype=float)
        L = cholesky_sqrt(self.transition_cov(x))
        z = rng.standard_normal(x.shape)
        return self.transition_mean(x) + np.einsum('...ij,...j->...i', L, z)

    def transition_logpdf_matrix(self, x_next, x_prev):
        """log p(x_next[a] | x_prev[b]) as an (A, B) matrix."""
        x_prev = np.atleast_2d(x_prev)
        cov = self.transition_cov(None if self.constant_transition_cov else x_prev)
        return gaussian_logpdf_matrix(x_next, self.transition_mean(x_prev), cov)

    def initial_state(self, rng):
        L = cholesky_sqrt(self.initial.cov)
        return self.initial.mean + L @ rng.standard_normal(self.dim_x)

    # observation
    def observe(self, x):
        raise NotImplementedError

    def observe_jacobian(self, x):
        raise NotImplementedError

    def observe_hessian(self, x):
        raise NotImplementedError

    @property
    def obs_cov(self):
        raise NotImplementedError

    def innovation(self, y, y_pred):
        return y - y_pred

    def sample_observation(self, x, rng):
        L = cholesky_sqrt(self.obs_cov)
        return self.observe(x) + L @ rng.standard_normal(self.dim_y)

    @cached_property
    def obs_precision(self):
        return inv_spd(self.obs_cov)

    def log_likelihood(self, y, x):
        nu = self.innovation(y, self.observe(x))
        return gaussian_logpdf(nu, np.zeros(self.dim_y), self.obs_cov)

    def likelihood_parts(self, y, x):
        """
        log p(y|x), its gradient and Hessian, and the PSD information J^T R^-1 J,
        computed in one pass.
        """
        x = np.asarray(x, dtype=float)
        nu = self.innovation(y, self.observe(x))
        J = self.observe_jacobian(x)
        Hh = self.observe_hessian(x)
        Rinv = self.obs_precision
        ll = gaussian_logpdf(nu, np.zeros(self.dim_y), self.obs_cov)
        wnu = np.einsum('ij,...j->...i', Rinv, nu)
        g = np.einsum('...ji,...j->...i', J, wnu)
        info = symmetrize(np.swapaxes(J, -1, -2) @ Rinv @ J)
        H = symmetrize(np.einsum('...k,...kij->...ij', wnu, Hh) - info)
        return ll, g, H, info

    def grad_log_likelihood(self, y, x):
        return self.likelihood_parts(y, x)[1]

    def hess_log_likelihood(self, y, x):
        return self.likelihood_parts(y, x)[2]

    def likelihood_information(self, y, x):
        return self.likelihood_parts(y, x)[3]

    def measurement_blocks(self, y):
        if not self.gaussian_likelihood:
            raise ValueError(f'{self.name} has no Gaussian measurement blocks')
        return [MeasurementBlock(self.observe, self.observe_jacobian, self.obs_cov,
                                 np.atleast_2d(y), residual=self.innovation)]


class AdditiveGaussianModel(StateSpaceModel):
    """
    Generic additive-Gaussian model built from callables.

    Pass `transition_matrix` for a linear transition, or `transition` and
    `transition_jac` for a nonlinear one. `angle_dims` lists observation
    components that are angles and need wrapped innovations.
    """

    def __init__(self, name, dim_x, dim_y, observe, observe_jacobian, observe_hessian,
                 obs_cov, transition_cov, transition_matrix=None, transition=None,
                 transition_jac=None, angle_dims=(), initial=None):
        self.name = name
        self.dim_x = dim_x
        self.dim_y = dim_y
        self._h = observe
        self._h_jac = observe_jacobian
        self._h_hess = observe_hessian
        self._R = symmetrize(np.atleast_2d(obs_cov))
        self._Q = symmetrize(np.atleast_2d(transition_cov))
        if transition_matrix is not None:
            F = np.atleast_2d(np.asarray(transition_matrix, dtype=float))
            self._f = lambda x: np.asarray(x) @ F.T
            self._f_jac = lambda x: np.broadcast_to(F, np.shape(x)[:-1] + F.shape)
        else:
            self._f = transition
            self._f_jac = transition_jac
        self.angle_dims = tuple(angle_dims)
        self.initial = initial

    def transition_mean(self, x):
        return self._f(np.asarray(x, dtype=float))

    def transition_jacobian(self, x):
        return self._f_jac(np.asarray(x, dtype=float))

    def transition_cov(self, x=None):
        if x is None:
            return self._Q
        return np.broadcast_to(self._Q, np.shape(x)[:-1] + self._Q.shape)

    def observe(self, x):
        return self._h(np.asarray(x, dtype=float))

    def observe_jacobian(self, x):
        return self._h_jac(np.asarray(x, dtype=float))

    def observe_hessian(self, x):
        return self._h_hess(np.asarray(x, dtype=float))

    @property
    def obs_cov(self):
        return self._R

    def innovation(self, y, y_pred):
        nu = np.asarray(y, dtype=float) - y_pred
        if self.angle_dims:
            nu = np.array(nu, copy=True)
            idx = list(self.angle_dims)
            nu[..., idx] = wrap_angle(nu[..., idx])
        return nu


class MixtureLikelihoodModel(StateSpaceModel):
    """
    Explicitly multimodal likelihood p(y|x) = sum_j w_j N(y_j; h_j(x), R_j).

    The observation is a stack (n_modes, dim_y), one row per mode; each mode is an
    AdditiveGaussianModel sharing the transition of the first one.
    """
    gaussian_likelihood = False

    def __init__(self, name, components, mode_weights):
        self.name = name
        self.components = list(components)
        self.mode_weights = np.asarray(mode_weights, dtype=float)
        if not np.isclose(self.mode_weights.sum(), 1.0):
            raise ValueError('Mode weights must sum to 1')
        base = self.components[0]
        self.dim_x = base.dim_x
        self.dim_y = base.dim_y
        self.initial = base.initial

    @property
    def n_modes(self):
        return len(self.components)

    def mode_problem(self, j, y):
        return self.components[j], np.asarray(y, dtype=float)[j]

    def transition_mean(self, x):
        return self.components[0].transition_mean(x)

    def transition_jacobian(self, x):
        return self.components[0].transition_jacobian(x)

    def transition_cov(self, x=None):
        return self.components[0].transition_cov(x)

    def sample_observation(self, x, rng):
        return np.stack([c.sample_observation(x, rng) for c in self.components])

    def likelihood_parts(self, y, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide='ignore'):
            logw = np.log(self.mode_weights)
        parts = [c.likelihood_parts(yj, x) for c, yj in zip(self.components, np.asarray(y))]
        logterms = np.stack([p[0] + lw for p, lw in zip(parts, logw)], axis=-1)
        grads = np.stack([p[1] for p in parts], axis=-2)
        hess = np.stack([p[2] for p in parts], axis=-3)
        infos = np.stack([np.broadcast_to(p[3], p[2].shape) for p in parts], axis=-3)
        return mixture_log_derivatives(logterms, grads, hess, infos)

    def log_likelihood(self, y, x):
        with np.errstate(divide='ignore'):
            logw = np.log(self.mode_weights)
        terms = [c.log_likelihood(yj, x) + lw
                 for c, yj, lw in zip(self.components, np.asarray(y), logw)]
        return logsumexp(np.stack(terms, axis=-1), axis=-1)


def log_posterior_parts(model, prior, y, x):
    """
    Unnormalized log posterior log p(y|x) + log N(x; prior), its gradient and Hessian.
    """
    ll, g, H, _ = model.likelihood_parts(y, x)
    return ll + prior.logpdf(x), g + prior.grad(x), H + prior.hess(x)


def simulate(model, steps, seed, x0=None):
    """
    Draw a ground-truth trajectory and its observation record.

    Parameters:
        model (StateSpaceModel | IdmParams): scenario; bare IDM parameters are
            wrapped in a ConvoyModel with default sensor settings.
        steps (int): number of transitions after x_0.
        seed (int | SeedSequence): entropy for the counter-based generator.
        x0 (array, optional): initial state; drawn from `model.initial` otherwise.

    Returns:
        truths (steps + 1, dim_x), observations (list of `steps` entries).
    """
    from .idm import ConvoyModel, IdmParams

    if isinstance(model, IdmParams):
        model = ConvoyModel(model)
    rng = make_rng(seed)
    if x0 is None:
        x0 = model.initial_state(rng)
    if hasattr(model, 'simulate_truth'):
        truths = model.simulate_truth(np.asarray(x0, dtype=float), steps, rng)
    else:
        truths = [np.asarray(x0, dtype=float)]
        for _ in range(steps):
            truths.append(model.sample_transition(truths[-1], rng))
        truths = np.stack(truths)
    observations = [model.sample_observation(x, rng) for x in truths[1:]]
    return truths, observations


# Toy problems. Each is a single filtering cycle: particles drawn from N(x_bar, P)
# are predicted with Q and updated with the listed observation.

TOY_DEFAULTS = {
    'linear1d': dict(prior_mean=[0.0], prior_cov=[[20.0]], transition_cov=[[5.0]],
                     obs_cov=[[10.0]], observation=[30.0]),
    'quadratic1d': dict(prior_mean=[0.0], prior_cov=[[20.0]], transition_cov=[[20.0]],
                        obs_cov=[[50.0]], observation=[30.0], scale=20.0),
    'cubic1d': dict(prior_mean=[0.0], prior_cov=[[20.0]], transition_cov=[[20.0]],
                    obs_cov=[[50.0]], observation=[20.0], scale=120.0),
    'bimodal2d': dict(prior_mean=[0.0, 0.0], prior_cov=[[9.0, 0.0], [0.0, 9.0]],
                      transition_cov=[[16.0, 0.0], [0.0, 16.0]],
                      mode_obs_covs=[[[0.8, 0.0], [0.0, 0.2]], [[4.0, 0.0], [0.0, 1.0]]],
                      mode_weights=[0.2, 0.8],
                      observation=[[10.0, 20.0], [10.0, -20.0]]),
    'banana2d-case1': dict(prior_mean=[0.0, 0.0], prior_cov=[[20.0, 0.0], [0.0, 20.0]],
                           transition_cov=[[20.0, 0.0], [0.0, 20.0]],
                           obs_cov=[[1.0, 0.0], [0.0, 0.16]], observation=[20.0, 0.0]),
    'banana2d-case2': dict(prior_mean=[0.0, 0.0], prior_cov=[[10.0, 0.0], [0.0, 10.0]],
                           transition_cov=[[5.0, 0.0], [0.0, 5.0]],
                           obs_cov=[[1.0, 0.0], [0.0, 0.16]], observation=[20.0, 0.0]),
}


def _identity_observation(n):
    eye = np.eye(n)
    return dict(observe=lambda x: np.array(x, dtype=float),
                observe_jacobian=lambda x: np.broadcast_to(eye, np.shape(x)[:-1] + (n, n)),
                observe_hessian=lambda x: np.zeros(np.shape(x)[:-1] + (n, n, n)))


def _power_observation(power, scale):
    """h(x) = x^power / scale on a scalar state."""
    def h(x):
        return x ** power / scale

    def jac(x):
        return (power * x ** (power - 1) / scale)[..., None]

    def hess(x):
        return (power * (power - 1) * x ** (power - 2) / scale)[..., None, None]

    return dict(observe=h, observe_jacobian=jac, observe_hessian=hess)


def range_bearing(x):
    r = np.hypot(x[..., 0], x[..., 1])
    return np.stack([r, np.arctan2(x[..., 1], x[..., 0])], axis=-1)


def range_bearing_jacobian(x):
    px, py = x[..., 0], x[..., 1]
    r2 = px ** 2 + py ** 2
    r = np.sqrt(r2)
    return np.stack([np.stack([px / r, py / r], axis=-1),
                     np.stack([-py / r2, px / r2], axis=-1)], axis=-2)


def range_bearing_hessian(x):
    px, py = x[..., 0], x[..., 1]
    r2 = px ** 2 + py ** 2
    r = np.sqrt(r2)
    r3 = r2 * r
    r4 = r2 * r2
    hr = np.stack([np.stack([py ** 2 / r3, -px * py / r3], axis=-1),
                   np.stack([-px * py / r3, px ** 2 / r3], axis=-1)], axis=-2)
    cross = (py ** 2 - px ** 2) / r4
    ht = np.stack([np.stack([2 * px * py / r4, cross], axis=-1),
                   np.stack([cross, -2 * px * py / r4], axis=-1)], axis=-2)
    return np.stack([hr, ht], axis=-3)


def build_toy(name, params=None):
    """
    Build a toy problem.

    Parameters:
        name (str): one of TOY_DEFAULTS.
        params (dict, optional): overrides of the default parameters.

    Returns:
        model, prior of the previous state N(x_bar, P), observation y
    """
    if name not in TOY_DEFAULTS:
        raise ValueError(f'Unknown toy problem {name!r}')
    p = {**TOY_DEFAULTS[name], **(params or {})}
    prev = GaussianPrior(p['prior_mean'], p['prior_cov'])
    n = prev.dim
    common = dict(transition_cov=p['transition_cov'], transition_matrix=np.eye(n), initial=prev)
    y = np.asarray(p['observation'], dtype=float)
    if name == 'linear1d':
        model = AdditiveGaussianModel(name, 1, 1, obs_cov=p['obs_cov'],
                                      **_identity_observation(1), **common)
    elif name in ('quadratic1d', 'cubic1d'):
        power = 2 if name == 'quadratic1d' else 3
        model = AdditiveGaussianModel(name, 1, 1, obs_cov=p['obs_cov'],
                                      **_power_observation(power, p['scale']), **common)
    elif name == 'bimodal2d':
        components = [AdditiveGaussianModel(f'{name}[{j}]', 2, 2, obs_cov=R,
                                            **_identity_observation(2), **common)
                      for j, R in enumerate(p['mode_obs_covs'])]
        model = MixtureLikelihoodModel(name, components, p['mode_weights'])
    else:
        model = AdditiveGaussianModel(name, 2, 2, obs_cov=p['obs_cov'], observe=range_bearing,
                                      observe_jacobian=range_bearing_jacobian,
                                      observe_hessian=range_bearing_hessian,
                                      angle_dims=(1,), **common)
    return model, prev, y


def one_step_prior(model, prev):
    """Prior of the filtered step for a single cycle: N(f(x_bar), F P F^T + Q)."""
    mean, cov = model.predict_components(prev.mean, prev.cov)
    return GaussianPrior(mean, cov)

