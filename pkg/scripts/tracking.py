"""
Tracking in clutter: multi-sensor bearings-only PDA likelihood, the joint
multi-target likelihood over association hypotheses, and the bearings-only
NCV model with its two-step triangulation initialization.
"""
import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from math import comb, perm

import numpy as np
from scipy.optimize import least_squares
from scipy.special import gammaln, xlogy

from .linalg import LOG_2PI, inv_spd, symmetrize
from .models import GaussianPrior, MeasurementBlock, StateSpaceModel, mixture_log_derivatives
from .utils import CombinatorialLimit, wrap_angle, wrap_interval

logger = logging.getLogger(__name__)

MAX_TARGETS = 8
MAX_HYPOTHESES = 500_000


@dataclass
class SensorScan:
    """
    Detections of one sensor at one time step.

    `detections` has shape (m, dim) and may be empty. `clutter_rate` is the
    expected clutter count per scan (lambda_c * V). `period`, when set, makes the
    measurement space periodic (bearings use 2*pi, ring roads their length).
    """
    position: np.ndarray
    detections: np.ndarray
    detection_prob: float
    clutter_rate: float
    volume: float
    obs_cov: np.ndarray
    period: float = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.obs_cov = np.atleast_2d(np.asarray(self.obs_cov, dtype=float))
        self.detections = np.asarray(self.detections, dtype=float).reshape(-1, self.obs_cov.shape[0])
        if not 0.0 <= self.detection_prob <= 1.0:
            raise ValueError(f'detection_prob={self.detection_prob} outside [0, 1]')

    @property
    def n_detections(self):
        return self.detections.shape[0]

    @property
    def clutter_density(self):
        return self.clutter_rate / self.volume

    def residual(self, y, y_pred):
        nu = np.asarray(y, dtype=float) - y_pred
        if self.period is not None:
            nu = wrap_interval(nu, self.period)
        return nu

    def clutter_log_factor(self):
        """log of V^-m (lambda_c V)^m e^{-lambda_c V} / m!"""
        m = self.n_detections
        return (-m * np.log(self.volume) + xlogy(m, self.clutter_rate)
                - self.clutter_rate - gammaln(m + 1))


def bearing(x, position):
    """Four-quadrant bearing of the (x1, x2) position of x seen from `position`."""
    return np.arctan2(x[..., 1] - position[1], x[..., 0] - position[0])


def bearing_derivatives(x, position):
    """Gradient (..., 2) and Hessian (..., 2, 2) of the bearing in the position coordinates."""
    dx = x[..., 0] - position[0]
    dy = x[..., 1] - position[1]
    r2 = dx ** 2 + dy ** 2
    r4 = r2 ** 2
    grad = np.stack([-dy / r2, dx / r2], axis=-1)
    cross = (dy ** 2 - dx ** 2) / r4
    hess = np.stack([np.stack([2 * dx * dy / r4, cross], axis=-1),
                     np.stack([cross, -2 * dx * dy / r4], axis=-1)], axis=-2)
    return grad, hess


def _pda_sensor_parts(sensor, x):
    """Per-sensor log term of the PDA likelihood with gradient, Hessian and information."""
    n = x.shape[-1]
    batch = x.shape[:-1]
    r = sensor.obs_cov[0, 0]
    m = sensor.n_detections
    with np.errstate(divide='ignore'):
        log_miss = np.log(sensor.clutter_density * (1 - sensor.detection_prob))
        log_pd = np.log(sensor.detection_prob)
    theta = bearing(x, sensor.position)
    gth, hth = bearing_derivatives(x, sensor.position)
    nu = wrap_angle(sensor.detections[:, 0] - theta[..., None])       # (..., m)

    logterms = np.empty(batch + (m + 1,))
    logterms[..., 0] = log_miss
    logterms[..., 1:] = log_pd - 0.5 * (nu ** 2 / r + np.log(r) + LOG_2PI)
    grads = np.zeros(batch + (m + 1, n))
    grads[..., 1:, :2] = (nu / r)[..., None] * gth[..., None, :]
    outer = gth[..., :, None] * gth[..., None, :] / r
    hess = np.zeros(batch + (m + 1, n, n))
    hess[..., 1:, :2, :2] = (nu / r)[..., None, None] * hth[..., None, :, :] - outer[..., None, :, :]
    infos = np.zeros_like(hess)
    infos[..., 1:, :2, :2] = outer[..., None, :, :]
    ll, g, H, info = mixture_log_derivatives(logterms, grads, hess, infos)
    return ll + sensor.clutter_log_factor(), g, H, info


def multisensor_pda_parts(scan, x):
    """
    Multi-sensor PDA log-likelihood with gradient, Hessian and information.

    The likelihood is the product over sensors of the Poisson clutter factor
    times [lambda_c (1 - P_d) + sum_i P_d N(y_i; h_j(x), R_j)].
    """
    sensors = [scan] if isinstance(scan, SensorScan) else list(scan)
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    ll = np.zeros(x.shape[:-1])
    g = np.zeros(x.shape)
    H = np.zeros(x.shape + (n,))
    info = np.zeros(x.shape + (n,))
    for sensor in sensors:
        parts = _pda_sensor_parts(sensor, x)
        ll = ll + parts[0]
        g += parts[1]
        H += parts[2]
        info += parts[3]
    return ll, g, H, info


def multisensor_pda_log_likelihood(scan, x):
    return multisensor_pda_parts(scan, x)[0]


@lru_cache(maxsize=64)
def association_hypotheses(n_targets, n_meas):
    """
    All injective partial maps of targets onto measurements.

    Returns:
        assign (H, n_targets) int array with -1 for a missed target,
        n_detected (H,) int array.
    """
    rows = []
    for n_det in range(min(n_targets, n_meas) + 1):
        for targets in itertools.combinations(range(n_targets), n_det):
            for meas in itertools.permutations(range(n_meas), n_det):
                row = [-1] * n_targets
                for t, j in zip(targets, meas):
                    row[t] = j
                rows.append(row)
    assign = np.array(rows, dtype=int).reshape(-1, n_targets)
    return assign, (assign >= 0).sum(axis=1)


def _check_enumeration(n_targets, n_meas, max_targets, max_hypotheses):
    if n_targets > max_targets:
        raise CombinatorialLimit(f'{n_targets} targets exceed the cap of {max_targets}')
    total = sum(comb(n_targets, d) * perm(n_meas, d) for d in range(min(n_targets, n_meas) + 1))
    if total > max_hypotheses:
        raise CombinatorialLimit(f'{total} association hypotheses for {n_targets} targets and '
                                 f'{n_meas} measurements exceed the cap of {max_hypotheses}')


def joint_multitarget_parts(scan, x_joint, n_targets, max_targets=MAX_TARGETS,
                            max_hypotheses=MAX_HYPOTHESES):
    """
    Joint multi-target log-likelihood with gradient, Hessian and information.

    Targets are measured through the first `n_targets` state components (their
    positions); clutter is uniform over the sensor volume (eta_c = 1/V). The sum
    runs over every number of detected targets and every injective association
    of detected targets to measurements.
    """
    x = np.asarray(x_joint, dtype=float)
    n = x.shape[-1]
    batch = x.shape[:-1]
    n_meas = scan.n_detections
    _check_enumeration(n_targets, n_meas, max_targets, max_hypotheses)
    assign, n_det = association_hypotheses(n_targets, n_meas)

    r = scan.obs_cov[0, 0]
    log_eta = -np.log(scan.volume)
    lam = scan.clutter_rate
    pd = scan.detection_prob
    with np.errstate(divide='ignore'):
        const = (xlogy(n_meas - n_det, lam) - lam - gammaln(n_meas - n_det + 1)
                 + xlogy(n_det, pd) + xlogy(n_targets - n_det, 1 - pd))
    const = np.where(np.isnan(const), -np.inf, const)

    pos = x[..., :n_targets]
    nu = scan.residual(scan.detections[:, 0], pos[..., :, None])        # (..., Nt, Nm)
    # per-pair log p(y_j | x_i) / eta_c, plus a zero column for missed targets
    pair = np.zeros(batch + (n_targets, n_meas + 1))
    pair[..., :n_meas] = -0.5 * (nu ** 2 / r + np.log(r) + LOG_2PI) - log_eta
    pair_grad = np.zeros_like(pair)
    pair_grad[..., :n_meas] = nu / r
    cols = np.where(assign < 0, n_meas, assign)                       # (H, Nt)
    rows = np.arange(n_targets)
    logterms = const + pair[..., rows, cols].sum(axis=-1)              # (..., H)
    grads = np.zeros(batch + (len(assign), n))
    grads[..., :n_targets] = pair_grad[..., rows, cols]
    detected = (assign >= 0).astype(float)
    hdiag = np.zeros(batch + (len(assign), n))
    hdiag[..., :n_targets] = -detected / r
    ll, g, H, info = mixture_log_derivatives(logterms, grads, hdiag, -hdiag, diagonal=True)
    ll = ll + n_meas * log_eta - gammaln(n_targets + 1)
    return ll, g, H, info


def joint_multitarget_log_likelihood(scan, x_joint, n_targets, **kwargs):
    return joint_multitarget_parts(scan, x_joint, n_targets, **kwargs)[0]


def ncv_matrices(dt, sigma_q2, dim=2):
    eye = np.eye(dim)
    F = np.block([[eye, dt * eye], [np.zeros((dim, dim)), eye]])
    Q = sigma_q2 * np.block([[dt ** 3 / 3 * eye, dt ** 2 / 2 * eye],
                             [dt ** 2 / 2 * eye, dt * eye]])
    return F, Q


def circular_array(n_sensors, radius, center=(0.0, 0.0)):
    """Sensors equally spaced on a circle enclosing the surveillance region."""
    angles = 2 * np.pi * np.arange(n_sensors) / n_sensors
    return np.asarray(center) + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


class BearingsOnlyModel(StateSpaceModel):
    """
    Single target (px, py, vx, vy) under a nearly-constant-velocity model,
    observed in clutter by bearing sensors.
    """
    gaussian_likelihood = False

    def __init__(self, sensors, sigma_q2=25.0, sigma_r2_deg=100.0, detection_prob=0.8,
                 clutter_rate=1.0, dt=1.0, initial=None):
        self.name = 'bearings-only'
        self.sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
        self.dim_x = 4
        self.dim_y = len(self.sensors)
        self.dt = dt
        self.F, self.Q = ncv_matrices(dt, sigma_q2)
        self.sigma_r2 = np.deg2rad(np.sqrt(sigma_r2_deg)) ** 2
        self.detection_prob = detection_prob
        self.clutter_rate = clutter_rate
        self.initial = initial

    @property
    def n_sensors(self):
        return len(self.sensors)

    def transition_mean(self, x):
        return np.asarray(x, dtype=float) @ self.F.T

    def transition_jacobian(self, x):
        return np.broadcast_to(self.F, np.shape(x)[:-1] + self.F.shape)

    def transition_cov(self, x=None):
        if x is None:
            return self.Q
        return np.broadcast_to(self.Q, np.shape(x)[:-1] + self.Q.shape)

    def observe(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([bearing(x, s) for s in self.sensors], axis=-1)

    def _scan(self, j, detections):
        return SensorScan(self.sensors[j], detections, self.detection_prob, self.clutter_rate,
                          2 * np.pi, [[self.sigma_r2]], period=2 * np.pi)

    def sample_observation(self, x, rng):
        scans = []
        for j, theta in enumerate(self.observe(x)):
            dets = []
            if rng.random() < self.detection_prob:
                dets.append(wrap_angle(theta + np.sqrt(self.sigma_r2) * rng.standard_normal()))
            n_clutter = rng.poisson(self.clutter_rate)
            dets.extend(rng.uniform(-np.pi, np.pi, size=n_clutter))
            dets = rng.permutation(np.asarray(dets, dtype=float))
            scans.append(self._scan(j, dets[:, None]))
        return scans

    def likelihood_parts(self, y, x):
        return multisensor_pda_parts(y, x)

    def log_likelihood(self, y, x):
        return multisensor_pda_log_likelihood(y, x)

    def measurement_blocks(self, y):
        blocks = []
        for sensor in y:
            pos = sensor.position

            def h(x, pos=pos):
                return bearing(np.asarray(x, dtype=float), pos)[..., None]

            def jac(x, pos=pos):
                x = np.asarray(x, dtype=float)
                grad, _ = bearing_derivatives(x, pos)
                out = np.zeros(x.shape[:-1] + (1, x.shape[-1]))
                out[..., 0, :2] = grad
                return out

            blocks.append(MeasurementBlock(h, jac, sensor.obs_cov, sensor.detections,
                                           sensor.detection_prob, sensor.clutter_density,
                                           sensor.residual))
        return blocks


def triangulate(model, scans, guess=None, passes=3):
    """
    Robust least-squares intersection of bearing lines.

    Each sensor contributes the detection closest (in angle) to the current
    estimate; the selection is refreshed over a few passes.

    Returns:
        position (2,), covariance (2, 2)
    """
    sigma = np.sqrt(model.sigma_r2)
    pos = np.mean(model.sensors, axis=0) if guess is None else np.asarray(guess, dtype=float)
    spread = np.ptp(model.sensors, axis=0).max() if len(model.sensors) > 1 else 1.0
    cov = np.eye(2) * spread ** 2
    for _ in range(passes):
        chosen = []
        for sensor in scans:
            if sensor.n_detections == 0:
                continue
            theta = bearing(pos, sensor.position)
            nu = wrap_angle(sensor.detections[:, 0] - theta)
            chosen.append((sensor.position, sensor.detections[np.argmin(np.abs(nu)), 0]))
        if len(chosen) < 2:
            logger.warning('Triangulation needs two sensors with detections, got %d', len(chosen))
            return pos, cov

        def residuals(p):
            return np.array([wrap_angle(y - bearing(p, s)) for s, y in chosen]) / sigma

        result = least_squares(residuals, pos, loss='soft_l1', f_scale=2.0)
        pos = result.x
        cov = inv_spd(result.jac.T @ result.jac + 1e-12 * np.eye(2))
    return pos, cov


def two_step_initialization(model, scans_first, scans_second):
    """
    Initial NCV belief from triangulations at two consecutive steps.

    Returns the GaussianPrior of the state at the second step.
    """
    p0, c0 = triangulate(model, scans_first)
    p1, c1 = triangulate(model, scans_second, guess=p0)
    dt = model.dt
    mean = np.concatenate([p1, (p1 - p0) / dt])
    cov = np.block([[c1, c1 / dt], [c1 / dt, (c0 + c1) / dt ** 2]])
    return GaussianPrior(mean, symmetrize(cov))
