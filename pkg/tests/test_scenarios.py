import numpy as np
import pytest
from numpy.testing import assert_allclose

from scripts.scenarios import (EXPERIMENTS, TOYS, build_scenario, observation_table,
                               scenario_parameters)
from scripts.tracking import SensorScan
from scripts.utils import ConfigError


def test_parameters_merge_overrides():
    params = scenario_parameters('bearings-only', dict(n_sensors=7))
    assert params['n_sensors'] == 7
    assert params['radius'] == 1000.0


@pytest.mark.parametrize('experiment, overrides, key', [
    ('pendulum', None, 'experiment'),
    ('convoy', dict(n_sensors=3), 'scenario.n_sensors'),
])
def test_parameter_errors(experiment, overrides, key):
    with pytest.raises(ConfigError) as err:
        scenario_parameters(experiment, overrides)
    assert err.value.key == key


@pytest.mark.parametrize('experiment', TOYS)
def test_toys_are_single_cycle(experiment):
    scenario = build_scenario(experiment, scenario_parameters(experiment), 0)
    assert scenario.single_cycle
    assert scenario.steps == 1
    assert scenario.truths.shape == (1, scenario.initial.dim)


def test_linear_cycle_prior():
    scenario = build_scenario('linear1d', scenario_parameters('linear1d'), 0)
    assert scenario.cycle_prior.cov[0, 0] == pytest.approx(25.0)
    assert scenario.initial.cov[0, 0] == pytest.approx(20.0)


def test_bearings_alignment():
    params = scenario_parameters('bearings-only', dict(steps=8))
    scenario = build_scenario('bearings-only', params, 3)
    assert not scenario.single_cycle
    assert scenario.steps == 8
    assert scenario.truths.shape == (8, 4)
    assert list(scenario.position_dims()) == [0, 1]
    assert len(scenario.observations[0]) == 4


def test_convoy_alignment():
    params = scenario_parameters('convoy', dict(steps=5, n_vehicles=3))
    scenario = build_scenario('convoy', params, 4)
    assert scenario.steps == 5
    assert scenario.truths.shape == (5, 6)
    assert list(scenario.position_dims()) == [0, 1, 2]
    assert_allclose(scenario.initial.cov, params['sigma_r2'] * np.eye(6))


def test_convoy_initial_mean_is_drawn_around_truth():
    params = scenario_parameters('convoy', dict(steps=3, n_vehicles=2))
    a = build_scenario('convoy', params, 4)
    b = build_scenario('convoy', params, 4)
    c = build_scenario('convoy', params, 5)
    offset = a.initial.mean - a.model.initial.mean
    assert np.all(offset != 0)
    assert np.all(np.abs(offset) < 6 * np.sqrt(params['sigma_r2']))
    assert_allclose(a.initial.mean, b.initial.mean, rtol=0, atol=0)
    assert not np.allclose(a.initial.mean, c.initial.mean)


def test_same_seed_same_scenario():
    params = scenario_parameters('bearings-only', dict(steps=4))
    a = build_scenario('bearings-only', params, 9)
    b = build_scenario('bearings-only', params, 9)
    assert_allclose(a.truths, b.truths, rtol=0, atol=0)
    assert_allclose(observation_table(a.observations), observation_table(b.observations), rtol=0, atol=0)


def scan(values):
    values = np.asarray(values, dtype=float).reshape(-1, 1)
    return SensorScan(np.zeros(2), values, 0.9, 1.0, 2 * np.pi, np.eye(1), 2 * np.pi)


def test_observation_table():
    scans = [[scan([0.1, 0.2]), scan([])], [scan([0.3]), scan([0.4])]]
    table = observation_table(scans)
    assert_allclose(table, [[0, 0, 0.1], [0, 0, 0.2], [1, 0, 0.3], [1, 1, 0.4]])
    assert observation_table([np.array([1.0, 2.0])]).tolist() == [[0, 0, 1.0, 2.0]]
    assert observation_table([]).shape == (0, 3)


def test_experiment_list():
    assert EXPERIMENTS[-2:] == ('bearings-only', 'convoy')
    assert len(TOYS) == 6
