"""
Stochastic Intelligent Driver Model on a ring road, discretized for joint
multi-target tracking of a convoy led by a truck.

State layout: (p_1..p_a, v_1..v_a), rear-bumper positions stored unwrapped.
Vehicle n follows vehicle n-1; on the ring the first vehicle follows the last.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .linalg import nearest_pd, symmetrize
from .models import GaussianPrior, StateSpaceModel
from .tracking import SensorScan, joint_multitarget_log_likelihood, joint_multitarget_parts
from .utils import DegenerateGap

logger = logging.getLogger(__name__)

CAR = dict(a=0.5, b=1.5, v0=15.0, length=5.0)
TRUCK = dict(a=0.4, b=1.2, v0=10.0, length=20.0)


@dataclass
class IdmParams:
    """
    Per-vehicle IDM parameters plus the discretization settings.

    a, b, v0 and lengths are arrays with one entry per vehicle; delta, s0 and
    T_h are shared.
    """
    a: np.ndarray
    b: np.ndarray
    v0: np.ndarray
    lengths: np.ndarray
    delta: float = 4.0
    s0: float = 0.5
    T_h: float = 1.0
    ring_circumference: float = 2000.0
    sigma_q2: float = 0.0625
    dt: float = 1.0

    def __post_init__(self):
        for name in ('a', 'b', 'v0', 'lengths'):
            value = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if np.any(value <= 0):
                raise ValueError(f'IDM parameter {name} must be positive, got {value}')
            setattr(self, name, value)
        if len({len(self.a), len(self.b), len(self.v0), len(self.lengths)}) != 1:
            raise ValueError('Per-vehicle IDM parameters must share one length')
        if self.delta < 1:
            raise ValueError(f'delta must be >= 1, got {self.delta}')
        for name in ('s0', 'T_h', 'ring_circumference', 'sigma_q2', 'dt'):
            if getattr(self, name) <= 0:
                raise ValueError(f'IDM parameter {name} must be positive')

    @property
    def n_vehicles(self):
        return len(self.a)

    @classmethod
    def convoy(cls, n_vehicles, target_distance=10.0, **kwargs):
        """A truck followed by n_vehicles - 1 cars; the headway follows the truck's v0."""
        kinds = [TRUCK] + [CAR] * (n_vehicles - 1)
        per_vehicle = {key: np.array([k[key] for k in kinds]) for key in ('a', 'b', 'v0')}
        kwargs.setdefault('T_h', target_distance / TRUCK['v0'])
        return cls(lengths=np.array([k['length'] for k in kinds]), **per_vehicle, **kwargs)

    def initial_state(self, spacing=30.0):
        """Convoy at rest, the leader at 0 and every net gap equal to `spacing`."""
        p = np.zeros(self.n_vehicles)
        for n in range(1, self.n_vehicles):
            p[n] = p[n - 1] - self.lengths[n] - spacing
        return np.concatenate([p, np.zeros(self.n_vehicles)])


def idm_acceleration(params, x, strict=True, min_gap=0.1):
    """
    Mean acceleration of every vehicle and its partial derivatives.

    Returns:
        vdot (..., a), (d/dp_prev, d/dp_own, d/dv_prev, d/dv_own) each (..., a),
        predecessor index array (a,)
    """
    x = np.asarray(x, dtype=float)
    n = params.n_vehicles
    p, v = x[..., :n], x[..., n:]
    prev = np.roll(np.arange(n), 1)
    p_prev, v_prev = p[..., prev], v[..., prev]
    if n == 1:
        dist = np.full(p.shape, params.ring_circumference)
    else:
        dist = np.mod(p_prev - p, params.ring_circumference)
    s = dist - params.lengths
    if np.any(s <= 0):
        if strict:
            raise DegenerateGap(f'Net gap {np.min(s):.3f} m <= 0: vehicles overlap')
        logger.debug('Flooring %d non-positive gaps at %.2f m', np.sum(s <= 0), min_gap)
        s = np.maximum(s, min_gap)

    a, b, v0, delta = params.a, params.b, params.v0, params.delta
    sq = 2 * np.sqrt(a * b)
    sbar = params.s0 + v * params.T_h + v * (v - v_prev) / sq
    ratio = np.abs(v / v0)
    vdot = a * (1 - ratio ** delta - (sbar / s) ** 2)

    dp_prev = 2 * a * sbar ** 2 / s ** 3
    dp_own = -dp_prev
    dv_prev = 2 * a * (sbar / s ** 2) * (v / sq)
    dv_own = (-a * (delta / v0) * ratio ** (delta - 1) * np.sign(v)
              - 2 * a * (sbar / s ** 2) * (params.T_h + (2 * v - v_prev) / sq))
    return vdot, (dp_prev, dp_own, dv_prev, dv_own), prev


def idm_step_matrices(params, x_joint, strict=True):
    """
    Linearized one-step transition x_k = A x_{k-1} + B + w_k, w_k ~ N(0, Q).

    A and B reproduce the Euler step x + dt (v, <vdot>) exactly at x_joint; Q is
    the process covariance of the linearized model, repaired to the nearest PD
    matrix when the coupling terms make it indefinite.
    """
    x = np.asarray(x_joint, dtype=float)
    n = params.n_vehicles
    dt = params.dt
    idx = np.arange(n)
    vdot, (dp_prev, dp_own, dv_prev, dv_own), prev = idm_acceleration(params, x, strict=strict)
    p, v = x[..., :n], x[..., n:]
    batch = x.shape[:-1]

    A = np.broadcast_to(np.eye(2 * n), batch + (2 * n, 2 * n)).copy()
    A[..., idx, n + idx] = dt
    A[..., n + idx, idx] += dt * dp_own
    A[..., n + idx, prev] += dt * dp_prev
    A[..., n + idx, n + idx] += dt * dv_own
    A[..., n + idx, n + prev] += dt * dv_prev

    B = np.zeros(batch + (2 * n,))
    B[..., n:] = dt * (vdot - dp_prev * p[..., prev] - dp_own * p
                       - dv_prev * v[..., prev] - dv_own * v)

    dt2, dt3 = dt ** 2, dt ** 3
    diag = np.zeros(batch + (2 * n,))
    diag[..., :n] = dt3 / 3 + dt
    diag[..., n:] = (dp_prev + dp_own + dv_prev + dv_own) * dt3 / 3 + dv_own * dt2 + dt
    # one-sided off-diagonal contributions; M + M^T adds both halves
    M = np.zeros(batch + (2 * n, 2 * n))
    M[..., idx, n + idx] += dv_own * dt3 / 3 + (dp_own + 1) * dt2 / 2
    M[..., n + idx, prev] += dv_prev * dt3 / 3 + dp_prev * dt2 / 2
    M[..., n + idx, n + prev] += dv_prev * dt2 / 3
    Q = params.sigma_q2 * (M + np.swapaxes(M, -1, -2))
    Q[..., np.arange(2 * n), np.arange(2 * n)] += params.sigma_q2 * diag
    repaired = nearest_pd(symmetrize(Q))
    return A, B, repaired


class ConvoyModel(StateSpaceModel):
    """
    Convoy on a ring road observed by one position sensor, with missed detections
    and Poisson clutter. Clutter falls on the confidence region around the convoy
    and the length of that region is the clutter volume V of each scan.

    Filter-side predictions floor overlapping gaps (`strict=False`); the truth
    integrator always raises on them.
    """
    gaussian_likelihood = False
    constant_transition_cov = False

    def __init__(self, params, sigma_r2=4.0, detection_prob=0.8, clutter_rate=0.01,
                 substeps=20, strict=False, initial=None):
        self.name = 'convoy'
        self.params = params
        self.dim_x = 2 * params.n_vehicles
        self.dim_y = 1
        self.sigma_r2 = sigma_r2
        self.detection_prob = detection_prob
        self.clutter_rate = clutter_rate
        self.substeps = substeps
        self.strict = strict
        if initial is None:
            x0 = params.initial_state()
            initial = GaussianPrior(x0, sigma_r2 * np.eye(self.dim_x))
        self.initial = initial

    @property
    def n_targets(self):
        return self.params.n_vehicles

    def transition_mean(self, x):
        x = np.asarray(x, dtype=float)
        n = self.params.n_vehicles
        vdot, _, _ = idm_acceleration(self.params, x, strict=self.strict)
        return x + self.params.dt * np.concatenate([x[..., n:], vdot], axis=-1)

    def transition_jacobian(self, x):
        return idm_step_matrices(self.params, x, strict=self.strict)[0]

    def transition_cov(self, x=None):
        if x is None:
            raise ValueError('The IDM process covariance depends on the state')
        return idm_step_matrices(self.params, x, strict=self.strict)[2]

    def predict_components(self, means, covs):
        A, B, Q = idm_step_matrices(self.params, means, strict=self.strict)
        mean = np.einsum('...ij,...j->...i', A, means) + B
        return mean, symmetrize(A @ covs @ np.swapaxes(A, -1, -2) + Q)

    def simulate_truth(self, x0, steps, rng):
        """Euler-Maruyama integration of the continuous-time stochastic IDM."""
        n = self.params.n_vehicles
        h = self.params.dt / self.substeps
        x = np.array(x0, dtype=float)
        out = [x.copy()]
        for _ in range(steps):
            for _ in range(self.substeps):
                vdot, _, _ = idm_acceleration(self.params, x, strict=True)
                x[:n] += x[n:] * h
                x[n:] += vdot * h + np.sqrt(self.params.sigma_q2 * h) * rng.standard_normal(n)
                x[n:] = np.maximum(x[n:], 0.0)
            out.append(x.copy())
        return np.stack(out)

    def surveillance_region(self, x):
        """
        Start and length of the stretch of road covering every vehicle with about
        99.73% confidence: the span of the rear bumpers plus 3 sigma_r on each
        side, at most the whole ring.
        """
        p = np.asarray(x, dtype=float)[:self.params.n_vehicles]
        margin = 3 * np.sqrt(self.sigma_r2)
        length = min(float(np.ptp(p)) + 2 * margin, self.params.ring_circumference)
        return float(p.min()) - margin, length

    def _scan(self, detections, volume):
        C = self.params.ring_circumference
        return SensorScan([0.0], detections, self.detection_prob, self.clutter_rate, volume,
                          [[self.sigma_r2]], period=C)

    def sample_observation(self, x, rng):
        """Scan with missed detections and Poisson clutter spread over the surveillance region."""
        n = self.params.n_vehicles
        C = self.params.ring_circumference
        start, volume = self.surveillance_region(x)
        detected = rng.random(n) < self.detection_prob
        noise = np.sqrt(self.sigma_r2) * rng.standard_normal(n)
        dets = list(np.mod(x[:n] + noise, C)[detected])
        clutter = start + rng.uniform(0.0, volume, size=rng.poisson(self.clutter_rate))
        dets.extend(np.mod(clutter, C))
        return self._scan(rng.permutation(np.asarray(dets, dtype=float))[:, None], volume)

    def likelihood_parts(self, y, x):
        return joint_multitarget_parts(y, x, self.n_targets)

    def log_likelihood(self, y, x):
        return joint_multitarget_log_likelihood(y, x, self.n_targets)
