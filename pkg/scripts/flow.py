"""
Langevin particle flow: drift, curvature-based diffusion matrix, integration
rules and the pseudo-time schedule.

The flow dx = 1/2 D grad log pi(x) dl + D^1/2 dW has the target pi as its
stationary density. D is the inverse of the local curvature -Hess log pi,
repaired to be positive definite.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.linalg import expm

from .linalg import cholesky_sqrt, inv_spd, nearest_pd, symmetrize
from .utils import InvalidPrecision, MapSearchDiverged

logger = logging.getLogger(__name__)

METHODS = ('expeuler', 'ozaki')


@dataclass
class FlowConfig:
    """
    Options shared by the flow-based filters.

    Args:
        epsilon (float): target total-variation precision, in (0, 1/2).
        l_cap (int | None): maximum number of pseudo-time steps per cycle.
        dlam_max (float | None): largest step a capped schedule may take; the
            horizon shrinks instead.
        method (str): 'expeuler' or 'ozaki'.
        frozen_d (bool): evaluate D once per cycle at the cloud mean.
        eig_floor (float | None): eigenvalue floor of the curvature repair.
        m_min_ratio, M_max: clamps of the convexity/smoothness constants.
        map_max_iter (int): Newton iterations of the MAP search.
        enm_threshold (float): resample the mixture when ENM < enm_threshold * N.
        ess_threshold (float): resample the marginal filter when ESS < ess_threshold * N.
        resample (bool): allow resampling at all.
        prior_mode (str): 'local' per-particle predicted components or 'global'
            moment-matched prior for every particle.
        simple_proposal (bool): marginal filter proposal with mixand weights only.
        aux_flow (bool): auxiliary prior-targeted flow for the mixture weights
            (reserved).
    """
    epsilon: float = 0.1
    l_cap: Optional[int] = 200
    dlam_max: Optional[float] = 0.5
    method: str = 'expeuler'
    frozen_d: bool = False
    eig_floor: Optional[float] = None
    m_min_ratio: float = 1e-3
    M_max: float = 1e6
    map_max_iter: int = 100
    enm_threshold: float = 0.5
    ess_threshold: float = 0.5
    resample: bool = True
    prior_mode: str = 'local'
    simple_proposal: bool = False
    aux_flow: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f'Unknown integration method {self.method!r}, expected one of {METHODS}')
        if self.prior_mode not in ('local', 'global'):
            raise ValueError(f'Unknown prior mode {self.prior_mode!r}')
        if not 0.0 < self.epsilon < 0.5:
            raise InvalidPrecision(f'epsilon={self.epsilon} outside (0, 1/2)')
        if self.dlam_max is not None and not self.dlam_max > 0:
            raise ValueError(f'dlam_max must be positive, got {self.dlam_max}')


@dataclass
class FlowContext:
    """
    Target of a flow.

    `parts(x)` returns (log pi, grad, Hessian, information) in one pass; the
    information is an optional PD curvature surrogate (expected Fisher
    information plus prior precision) that bounds the curvature metric from
    below. Contexts built from plain callables fill `parts` themselves.
    """
    grad: Callable
    hess: Callable
    dim: int
    log_density: Optional[Callable] = None
    parts: Optional[Callable] = None

    def evaluate(self, x):
        if self.parts is not None:
            return self.parts(x)
        lp = self.log_density(x) if self.log_density is not None else None
        return lp, self.grad(x), self.hess(x), None

    def logpdf(self, x):
        if self.parts is not None:
            return self.parts(x)[0]
        return self.log_density(x)

    @classmethod
    def from_parts(cls, parts, dim):
        return cls(grad=lambda x: parts(x)[1], hess=lambda x: parts(x)[2], dim=dim,
                   log_density=lambda x: parts(x)[0], parts=parts)

    @classmethod
    def from_posterior(cls, model, prior, y):
        """Unnormalized posterior p(y|x) N(x; prior); `prior` may be batched per particle."""
        def parts(x):
            ll, g, H, info = model.likelihood_parts(y, x)
            prec = prior.precision
            return (ll + prior.logpdf(x), g + prior.grad(x), H + prior.hess(x),
                    None if info is None else info + prec)
        return cls.from_parts(parts, prior.dim)

    @classmethod
    def gaussian(cls, mean, cov):
        from .models import GaussianPrior
        prior = GaussianPrior(mean, cov)

        def parts(x):
            return prior.logpdf(x), prior.grad(x), prior.hess(x), None
        return cls.from_parts(parts, prior.dim)


class Bounds(NamedTuple):
    m: float
    M: float
    x_map: np.ndarray


@dataclass
class FlowSchedule:
    T: float
    dlam: float
    L: int
    gamma: float
    m: float
    M: float
    epsilon: float
    capped: bool = False

    @property
    def horizon(self):
        """Pseudo-time actually integrated, L * dlam."""
        return self.L * self.dlam


# -Hessian is kept down to this fraction of the information surrogate
INFO_RATIO = 0.5


def curvature_metric(neg_hess, info=None, floor=None, info_ratio=INFO_RATIO):
    """
    Positive-definite curvature from -Hessian.

    With an information surrogate I (PD), -Hessian is whitened by I; whitened
    eigenvalues below `info_ratio` are raised to it, so the metric never drops
    below info_ratio * I and D stays bounded where the target is flat or not
    log-concave. Matrices already above the ratio are left untouched. The result
    always passes through nearest_pd.
    """
    neg_hess = symmetrize(neg_hess)
    if info is not None:
        shape = np.broadcast_shapes(neg_hess.shape, np.shape(info))
        neg_hess = np.broadcast_to(neg_hess, shape)
        L = cholesky_sqrt(nearest_pd(np.broadcast_to(info, shape)))
        Linv = np.linalg.solve(L, np.broadcast_to(np.eye(shape[-1]), shape))
        vals, vecs = np.linalg.eigh(symmetrize(Linv @ neg_hess @ np.swapaxes(Linv, -1, -2)))
        low = np.asarray(vals.min(axis=-1) < info_ratio)
        if np.any(low):
            raised = (vecs * np.maximum(vals, info_ratio)[..., None, :]) @ np.swapaxes(vecs, -1, -2)
            repaired = symmetrize(L @ raised @ np.swapaxes(L, -1, -2))
            neg_hess = np.where(low[..., None, None], repaired, neg_hess)
    return nearest_pd(neg_hess, floor)


def drift(ctx, x, d):
    """1/2 D grad log pi(x)."""
    g = ctx.grad(x)
    return 0.5 * np.einsum('...ij,...j->...i', d, g)


def diffusion_matrix(ctx, x, floor=None):
    """Inverse of the repaired local curvature of log pi at x."""
    _, _, H, info = ctx.evaluate(x)
    return inv_spd(curvature_metric(-H, info, floor))


def find_map(ctx, x0, max_iter=100, gtol=1e-9, floor=None):
    """
    Damped Newton ascent of log pi with backtracking line search.

    Raises:
        MapSearchDiverged: no convergence within `max_iter` iterations.
    """
    x = np.array(x0, dtype=float)
    lp, g, H, info = ctx.evaluate(x)
    for _ in range(max_iter):
        if not np.all(np.isfinite(g)):
            break
        if np.linalg.norm(g) <= gtol * max(1.0, abs(lp)):
            return x
        step = np.linalg.solve(curvature_metric(-H, info, floor), g)
        slope = g @ step
        t = 1.0
        while t > 1e-12:
            x_new = x + t * step
            lp_new, g_new, H_new, info_new = ctx.evaluate(x_new)
            if np.isfinite(lp_new) and lp_new >= lp + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no ascent left in floating point
            if np.linalg.norm(g) <= 1e-6:
                return x
            break
        if np.linalg.norm(x_new - x) <= 1e-14 * (1.0 + np.linalg.norm(x)):
            return x_new
        x, lp, g, H, info = x_new, lp_new, g_new, H_new, info_new
    raise MapSearchDiverged(f'MAP search did not converge from {np.asarray(x0)}')


def estimate_bounds(ctx, samples, x_map=None, m_min_ratio=1e-3, M_max=1e6, max_iter=100):
    """
    Convexity m and gradient-Lipschitz M constants of Phi = -log pi around its MAP.

    For each sample, m_i = 2 [Phi(x) - Phi(xbar) - grad Phi(xbar)^T (x - xbar)] / |x - xbar|^2
    and M_i = |grad Phi(x) - grad Phi(xbar)| / |x - xbar|. The tightest constants
    that satisfy the inequalities over the whole sample set are min m_i and
    max M_i; both are then clamped to m >= m_min_ratio * M and M <= M_max.

    Parameters:
        ctx (FlowContext): target.
        samples (array (S, n)): at least two points.
        x_map (array, optional): skip the MAP search and expand around this point.

    Returns:
        Bounds(m, M, x_map)
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(samples) < 2:
        raise ValueError('estimate_bounds needs at least two samples')
    lp_s, g_s, _, _ = ctx.evaluate(samples)
    if x_map is None:
        finite = np.where(np.isfinite(lp_s), lp_s, -np.inf)
        x_map = find_map(ctx, samples[np.argmax(finite)], max_iter=max_iter)
    x_map = np.asarray(x_map, dtype=float)
    lp0, g0, H0, info0 = ctx.evaluate(x_map)

    delta = samples - x_map
    dist2 = np.sum(delta ** 2, axis=-1)
    ok = (dist2 > 1e-20) & np.isfinite(lp_s) & np.all(np.isfinite(g_s), axis=-1)
    if np.any(ok):
        # Phi = -log pi, so Phi(x) - Phi(xbar) - gradPhi(xbar).(x - xbar) = lp0 - lp + g0.delta
        m_i = 2 * (lp0 - lp_s[ok] + delta[ok] @ g0) / dist2[ok]
        M_i = np.linalg.norm(g_s[ok] - g0, axis=-1) / np.sqrt(dist2[ok])
        m, M = float(np.min(m_i)), float(np.max(M_i))
    else:
        eig = np.linalg.eigvalsh(curvature_metric(-H0, info0))
        m, M = float(eig[0]), float(eig[-1])
    if not M > 0:
        M = max(float(np.linalg.eigvalsh(curvature_metric(-H0, info0))[-1]), 1e-12)
    M = min(M, M_max)
    m = min(max(m, m_min_ratio * M), M)
    return Bounds(m, M, x_map)


def schedule(m, M, n_x, epsilon, l_cap=200, dlam_max=None):
    """
    Pseudo-time horizon and step for a Langevin flow to reach precision epsilon.

    T = (4 ln(1/eps) + n_x ln(M/m)) / (2m), gamma = (1 + M n_x T / eps^2) / 2,
    dlam = eps^2 (2 gamma - 1) / (M^2 T n_x gamma) and L = ceil(T / dlam).
    When L exceeds `l_cap` the step is stretched to T / l_cap and the schedule
    is marked capped. A capped step is further limited to `dlam_max`, in which
    case the integrated horizon L * dlam falls short of T.
    """
    if not 0.0 < epsilon < 0.5:
        raise InvalidPrecision(f'epsilon={epsilon} outside (0, 1/2)')
    if not 0.0 < m <= M:
        raise ValueError(f'Expected 0 < m <= M, got m={m}, M={M}')
    T = (4 * math.log(1 / epsilon) + n_x * math.log(M / m)) / (2 * m)
    gamma = (1 + M * n_x * T / epsilon ** 2) / 2
    dlam = epsilon ** 2 * (2 * gamma - 1) / (M ** 2 * T * n_x * gamma)
    L = math.ceil(T / dlam)
    capped = False
    if l_cap is not None and L > l_cap:
        L, dlam, capped = int(l_cap), T / l_cap, True
        if dlam_max is not None and dlam > dlam_max:
            dlam = float(dlam_max)
    return FlowSchedule(T=T, dlam=dlam, L=L, gamma=gamma, m=m, M=M, epsilon=epsilon, capped=capped)


def _isotropic(A, rtol=1e-12):
    """Per-matrix test A == alpha I; returns (mask, alpha)."""
    n = A.shape[-1]
    diag = np.diagonal(A, axis1=-2, axis2=-1)
    alpha = diag.mean(axis=-1)
    scale = np.maximum(np.abs(A).max(axis=(-2, -1)), 1e-300)
    off = np.abs(A - alpha[..., None, None] * np.eye(n)).max(axis=(-2, -1))
    return off <= rtol * scale, alpha


def _phi1(z):
    """(e^z - 1) / z with the removable singularity at 0."""
    z = np.asarray(z, dtype=float)
    safe = np.where(np.abs(z) < 1e-12, 1.0, z)
    return np.where(np.abs(z) < 1e-12, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def discretize_affine(A, a, Q, dt):
    """
    Exact transition of du = (A u + a) dl + Q^1/2 dW over dt, for stacks.

    Returns (Phi, b, Qd) with u(dt) ~ N(Phi u(0) + b, Qd). The Van Loan
    exponential holds e^{-A dt}, which overflows for stiff stable A, so the step
    is halved s times until |A dt / 2^s| <= 1/2 and rebuilt by doubling:
    b <- Phi b + b, Qd <- Phi Qd Phi^T + Qd, Phi <- Phi^2.
    """
    A = np.asarray(A, dtype=float)
    a = np.asarray(a, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = A.shape[-1]
    batch = np.broadcast_shapes(A.shape[:-2], a.shape[:-1], Q.shape[:-2])
    A = np.broadcast_to(A, batch + (n, n))
    norm = float(np.max(np.abs(A).sum(axis=-1), initial=0.0)) * dt
    s = math.ceil(math.log2(2 * norm)) if 0.5 < norm < math.inf else 0
    h = dt / 2 ** s

    aug = np.zeros(batch + (n + 1, n + 1))
    aug[..., :n, :n] = A * h
    aug[..., :n, n] = a * h
    E = expm(aug)
    Phi, b = E[..., :n, :n], E[..., :n, n]
    van = np.zeros(batch + (2 * n, 2 * n))
    van[..., :n, :n] = -A * h
    van[..., :n, n:] = Q * h
    van[..., n:, n:] = np.swapaxes(A, -1, -2) * h
    F = expm(van)
    Qd = np.swapaxes(F[..., n:, n:], -1, -2) @ F[..., :n, n:]
    for _ in range(s):
        b = np.einsum('...ij,...j->...i', Phi, b) + b
        Qd = Phi @ Qd @ np.swapaxes(Phi, -1, -2) + Qd
        Phi = Phi @ Phi
    return Phi, b, symmetrize(Qd)


def integrate_step(ctx, x, d, dlam, noise, method='expeuler', grad=None, metric=None, floor=None):
    """
    Advance particles by one pseudo-time step.

    expeuler: x + (1 - e^{-dlam/2}) D grad + (1 - e^{-dlam})^{1/2} D^{1/2} noise.
    ozaki: exact solution over the step of the flow linearized at x, with drift
    matrix A = -1/2 D (repaired -Hessian); matrix exponentials are replaced by
    scalars when A is isotropic. Both rules coincide whenever D is the inverse
    of the repaired curvature at x.

    `grad` and `metric` (repaired -Hessian) may be passed when already known.
    """
    x = np.asarray(x, dtype=float)
    d = symmetrize(np.asarray(d, dtype=float))
    noise = np.asarray(noise, dtype=float)
    if grad is None or (method == 'ozaki' and metric is None):
        _, g, H, info = ctx.evaluate(x)
        grad = g if grad is None else grad
        if method == 'ozaki' and metric is None:
            metric = curvature_metric(-H, info, floor)
    sqrt_d = cholesky_sqrt(d)
    if method == 'expeuler':
        det = -math.expm1(-0.5 * dlam) * np.einsum('...ij,...j->...i', d, grad)
        sto = math.sqrt(-math.expm1(-dlam)) * np.einsum('...ij,...j->...i', sqrt_d, noise)
        return x + det + sto
    if method != 'ozaki':
        raise ValueError(f'Unknown integration method {method!r}')

    n = x.shape[-1]
    shape = x.shape
    xf = x.reshape(-1, n)
    k = len(xf)
    d_f = np.broadcast_to(d, shape[:-1] + (n, n)).reshape(k, n, n)
    m_f = np.broadcast_to(metric, shape[:-1] + (n, n)).reshape(k, n, n)
    g_f = np.broadcast_to(grad, shape).reshape(k, n)
    z_f = np.broadcast_to(noise, shape).reshape(k, n)
    sqrt_f = np.broadcast_to(sqrt_d, shape[:-1] + (n, n)).reshape(k, n, n)

    A = -0.5 * d_f @ m_f
    a = 0.5 * np.einsum('kij,kj->ki', d_f, g_f)
    iso, alpha = _isotropic(A)
    out = np.array(xf, copy=True)

    if np.any(iso):
        z = alpha[iso] * dlam
        det = (dlam * _phi1(z))[:, None] * a[iso]
        scale = np.sqrt(dlam * _phi1(2 * z))
        out[iso] += det + scale[:, None] * np.einsum('kij,kj->ki', sqrt_f[iso], z_f[iso])

    gen = ~iso
    if np.any(gen):
        # displacement u = x' - x of the flow linearized at x, u(0) = 0
        _, det, Qd = discretize_affine(A[gen], a[gen], d_f[gen], dlam)
        out[gen] += det + np.einsum('kij,kj->ki', cholesky_sqrt(nearest_pd(Qd)), z_f[gen])
    return out.reshape(shape)


def run_flow(ctx, x0, flow_schedule, rng, config=None, stochastic=True):
    """
    Integrate particles through a full schedule.

    Parameters:
        ctx (FlowContext): target shared by every particle.
        x0 (array (N, n)): starting particles.
        flow_schedule (FlowSchedule): horizon and step.
        rng (np.random.Generator): noise source; ignored when not stochastic.
        config (FlowConfig): integration method, frozen D and floor.
        stochastic (bool): zero-noise flow when False.

    Returns:
        particles at the end of the schedule.
    """
    config = config or FlowConfig()
    x = np.array(x0, dtype=float)
    d_frozen = None
    if config.frozen_d:
        d_frozen = diffusion_matrix(ctx, x.mean(axis=0), config.eig_floor)
    for _ in range(flow_schedule.L):
        _, g, H, info = ctx.evaluate(x)
        metric = curvature_metric(-H, info, config.eig_floor)
        d = inv_spd(metric) if d_frozen is None else np.broadcast_to(d_frozen, metric.shape)
        noise = rng.standard_normal(x.shape) if stochastic else np.zeros(x.shape)
        x = integrate_step(ctx, x, d, flow_schedule.dlam, noise, config.method,
                           grad=g, metric=metric, floor=config.eig_floor)
    return x
