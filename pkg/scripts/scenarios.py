"""
Scenario builders for the experiment runner: the six single-cycle toy problems,
multi-sensor bearings-only tracking in clutter and the IDM convoy.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .idm import ConvoyModel, IdmParams
from .linalg import cholesky_sqrt
from .models import TOY_DEFAULTS, GaussianPrior, build_toy, one_step_prior, simulate
from .tracking import BearingsOnlyModel, SensorScan, circular_array, two_step_initialization
from .utils import ConfigError, make_rng, spawn_seeds

logger = logging.getLogger(__name__)

TOYS = tuple(TOY_DEFAULTS)
EXPERIMENTS = TOYS + ('bearings-only', 'convoy')

BEARINGS_DEFAULTS = dict(n_sensors=4, radius=1000.0, sigma_q2=25.0, sigma_r2_deg=100.0,
                         detection_prob=0.8, clutter_rate=1.0, dt=1.0, steps=20,
                         initial_state=[0.0, 0.0, 5.0, 0.0], initial_spread=[10.0, 10.0, 1.0, 1.0])

CONVOY_DEFAULTS = dict(n_vehicles=2, sigma_r2=4.0, detection_prob=0.8, clutter_rate=0.01,
                       substeps=20, steps=60, dt=1.0, ring_circumference=2000.0,
                       sigma_q2=0.0625, target_distance=10.0, spacing=30.0)


def scenario_parameters(experiment, overrides=None):
    """
    Default parameters of an experiment merged with `overrides`.

    Raises:
        ConfigError: unknown experiment or parameter name.
    """
    if experiment not in EXPERIMENTS:
        raise ConfigError('experiment', f'unknown experiment {experiment!r}, expected one of {EXPERIMENTS}')
    if experiment in TOYS:
        defaults = TOY_DEFAULTS[experiment]
    elif experiment == 'bearings-only':
        defaults = BEARINGS_DEFAULTS
    else:
        defaults = CONVOY_DEFAULTS
    overrides = dict(overrides or {})
    for key in overrides:
        if key not in defaults:
            raise ConfigError(f'scenario.{key}', f'not a parameter of {experiment}')
    return {**defaults, **overrides}


@dataclass
class Scenario:
    """
    One Monte Carlo realization.

    initial: belief the filters start from.
    observations: one entry per filtered step; truths align with them.
    cycle_prior: shared predicted prior of a single-cycle toy (None for tracking).
    """
    experiment: str
    model: object
    initial: GaussianPrior
    observations: list
    truths: np.ndarray
    cycle_prior: Optional[GaussianPrior] = None

    @property
    def single_cycle(self):
        return self.cycle_prior is not None

    @property
    def steps(self):
        return len(self.observations)

    def position_dims(self):
        """State components scored by RMSE / NEES."""
        if self.experiment == 'bearings-only':
            return np.array([0, 1])
        if self.experiment == 'convoy':
            return np.arange(self.model.n_targets)
        return np.arange(self.initial.dim)


def build_model(experiment, params):
    """Model of an experiment; toys also return the previous-state prior and the observation."""
    if experiment in TOYS:
        toy = {key: params[key] for key in TOY_DEFAULTS[experiment]}
        return build_toy(experiment, toy)
    if experiment == 'bearings-only':
        spread = np.asarray(params['initial_spread'], dtype=float)
        initial = GaussianPrior(params['initial_state'], np.diag(spread ** 2))
        sensors = circular_array(int(params['n_sensors']), params['radius'])
        return BearingsOnlyModel(sensors, sigma_q2=params['sigma_q2'],
                                 sigma_r2_deg=params['sigma_r2_deg'],
                                 detection_prob=params['detection_prob'],
                                 clutter_rate=params['clutter_rate'], dt=params['dt'],
                                 initial=initial)
    idm = IdmParams.convoy(int(params['n_vehicles']), target_distance=params['target_distance'],
                           ring_circumference=params['ring_circumference'],
                           sigma_q2=params['sigma_q2'], dt=params['dt'])
    x0 = idm.initial_state(spacing=params['spacing'])
    dim = len(x0)
    return ConvoyModel(idm, sigma_r2=params['sigma_r2'], detection_prob=params['detection_prob'],
                       clutter_rate=params['clutter_rate'], substeps=int(params['substeps']),
                       initial=GaussianPrior(x0, params['sigma_r2'] * np.eye(dim)))


def build_scenario(experiment, params, seed):
    """
    Simulate one realization of an experiment.

    Toys are a single cycle from N(x_bar, P) with the listed observation; the
    truth is a draw from the one-cycle predicted prior and only serves
    the scenario dump.

    Bearings-only tracks start from a two-step triangulation on the first two
    scans and are filtered on the remaining ones. Convoy tracks start from
    N(m_0, sigma_r^2 I), with m_0 itself drawn from N(x_0, sigma_r^2 I) around
    the true initial state.
    """
    if experiment in TOYS:
        model, prev, y = build_model(experiment, params)
        cycle_prior = one_step_prior(model, prev)
        truth = cycle_prior.mean + cholesky_sqrt(cycle_prior.cov) @ make_rng(seed).standard_normal(prev.dim)
        return Scenario(experiment, model, prev, [y], truth[None], cycle_prior)

    model = build_model(experiment, params)
    steps = int(params['steps'])
    if experiment == 'bearings-only':
        truths, observations = simulate(model, steps + 2, seed)
        initial = two_step_initialization(model, observations[0], observations[1])
        return Scenario(experiment, model, initial, observations[2:], truths[3:])
    truths, observations = simulate(model, steps, seed, x0=model.initial.mean)
    cov = model.sigma_r2 * np.eye(model.dim_x)
    offset = cholesky_sqrt(cov) @ make_rng(spawn_seeds(seed, 1)[0]).standard_normal(model.dim_x)
    initial = GaussianPrior(truths[0] + offset, cov)
    return Scenario(experiment, model, initial, observations, truths[1:])


def observation_table(observations):
    """
    Flatten an observation record into rows (step, sensor, value...).

    Sensor scans contribute one row per detection; array observations one row
    per mode (or a single row).
    """
    rows = []
    for step, y in enumerate(observations):
        if isinstance(y, SensorScan):
            scans = [y]
        elif isinstance(y, (list, tuple)):
            scans = y
        else:
            scans = list(np.atleast_2d(np.asarray(y, dtype=float)))
        for sensor, scan in enumerate(scans):
            values = scan.detections if isinstance(scan, SensorScan) else np.atleast_2d(scan)
            for row in np.atleast_2d(values):
                if row.size:
                    rows.append(np.concatenate([[step, sensor], row]))
    if not rows:
        return np.zeros((0, 3))
    return np.stack(rows)
