import json

import h5py
import numpy as np
import pytest

import scripts.experiment as experiment
from scripts.config import parse_config
from scripts.experiment import CSV_COLUMNS, run_experiment, summarize, write_csv, write_report
from scripts.utils import NotPositiveDefinite


def linear_config(**extra):
    raw = dict(experiment='linear1d', filters=['ekf', 'mapf', 'spf-gs', 'marginal-target'],
               n_particles=100, mc_runs=3, seed=1, flow=dict(l_cap=100), grid=dict(points_1d=512))
    raw.update(extra)
    return parse_config(raw)


@pytest.fixture(scope='module')
def linear_report():
    return run_experiment(linear_config(), threads=1, progress=False)


def test_linear_metrics(linear_report):
    report = linear_report
    assert report.value('linear1d', 'ekf', 'jsd') < 1e-6
    assert report.value('linear1d', 'spf-gs', 'jsd') < 1e-4
    assert report.value('linear1d', 'mapf', 'ess_fraction') == pytest.approx(1.0, abs=1e-8)
    assert report.value('linear1d', 'spf-gs', 'enm_fraction') == pytest.approx(1.0, abs=1e-8)
    assert 0.0 <= report.value('linear1d', 'marginal-target', 'jsd') <= 1.0
    assert {row['mc_runs'] for row in report.rows} == {3}
    assert not report.failures
    with pytest.raises(KeyError):
        report.value('linear1d', 'ekf', 'rmse')


def test_metric_order(linear_report):
    mapf = [row['metric'] for row in linear_report.rows if row['filter'] == 'mapf']
    assert mapf == ['jsd', 'ess_fraction']
    assert all(row['metric'] != 'wall_time' for row in linear_report.rows)


def test_reports_do_not_depend_on_workers(tmp_path, linear_report):
    again = run_experiment(linear_config(), threads=2, progress=False)
    write_csv(linear_report, tmp_path / 'a.csv')
    write_csv(again, tmp_path / 'b.csv')
    assert (tmp_path / 'a.csv').read_bytes() == (tmp_path / 'b.csv').read_bytes()
    header = (tmp_path / 'a.csv').read_text().splitlines()[0]
    assert header == ','.join(CSV_COLUMNS)


def test_zero_runs():
    report = run_experiment(linear_config(mc_runs=0), threads=1, progress=False)
    assert report.rows == []
    assert report.to_frame().columns.tolist() == list(CSV_COLUMNS)


def test_filter_failure_is_recorded(monkeypatch):
    def broken(*args, **kwargs):
        raise NotPositiveDefinite('covariance collapsed')
    monkeypatch.setattr(experiment, 'ekf_step', broken)
    report = run_experiment(linear_config(filters=['ekf', 'mapf'], mc_runs=2), threads=1,
                            progress=False)
    assert {f['filter'] for f in report.failures} == {'ekf'}
    assert report.failures[0]['error'] == 'NotPositiveDefinite'
    assert report.failures[0]['experiment'] == 'linear1d'
    assert {row['filter'] for row in report.rows} == {'mapf'}


def test_timing_and_outputs(tmp_path):
    config = linear_config(filters=['ekf'], mc_runs=2,
                           output=dict(dir=str(tmp_path), include_timing=True, save_scenarios=True))
    report = run_experiment(config, threads=1, progress=False)
    assert report.value('linear1d', 'ekf', 'wall_time') > 0
    csv_path, json_path = write_report(report, config)
    assert csv_path.exists()
    data = json.loads(json_path.read_text())
    assert list(data) == sorted(data)
    assert data['metadata']['filters'] == ['ekf']
    with h5py.File(tmp_path / 'scenarios.h5', 'r') as file:
        assert file['linear1d/Truths'].shape == (2, 1, 1)


def test_summarize():
    out = summarize(dict(rmse=[1.0, 2.0, 3.0], nees=[1.0, 10.0, 100.0], wall_time=[0.1, 0.2]))
    assert 'wall_time' not in out
    assert out['rmse'] == pytest.approx((2.0, 1 / np.sqrt(3), 3))
    assert out['rmse_median'] == pytest.approx((2.0, np.sqrt(np.pi / 2) / np.sqrt(3), 3))
    assert out['log10_nees'][0] == pytest.approx(1.0)
    assert list(out) == ['rmse', 'rmse_median', 'nees', 'log10_nees']
    assert summarize(dict(wall_time=[0.5]), include_timing=True)['wall_time'] == (0.5, 0.0, 1)


def test_bearings_smoke():
    config = parse_config(dict(experiment='bearings-only', filters=['ekf', 'ukf', 'bootstrap-pf', 'spf-gs'],
                               n_particles=50, mc_runs=2, seed=3, flow=dict(l_cap=20),
                               scenario=dict(steps=3)))
    report = run_experiment(config, threads=1, progress=False)
    assert np.isfinite(report.value('bearings-only', 'ekf', 'rmse'))
    assert report.value('bearings-only', 'ekf', 'nees') > 0
    assert 0 < report.value('bearings-only', 'bootstrap-pf', 'ess_fraction') <= 1
    assert not [f for f in report.failures if f['filter'] == 'spf-gs']
    assert np.isfinite(report.value('bearings-only', 'spf-gs', 'rmse'))
    series = report.series['bearings-only']['ekf']
    assert len(series['rmse']) == 3


def test_convoy_smoke():
    config = parse_config(dict(experiment='convoy', filters=['bootstrap-pf', 'mbpf'],
                               n_particles=40, mc_runs=2, seed=4, flow=dict(l_cap=10),
                               scenario=dict(steps=3, substeps=5),
                               sweep=dict(n_vehicles=[1, 2])))
    report = run_experiment(config, threads=1, progress=False)
    labels = {row['experiment'] for row in report.rows}
    assert labels == {'convoy[n_vehicles=1]', 'convoy[n_vehicles=2]'}
    assert np.isfinite(report.value('convoy[n_vehicles=2]', 'bootstrap-pf', 'rmse'))


@pytest.mark.slow
def test_linear_acceptance():
    config = linear_config(filters=['spf-gs', 'mapf', 'mbpf', 'marginal-target'], n_particles=1000, mc_runs=10,
                           grid=dict(points_1d=2048))
    report = run_experiment(config, threads=1, progress=False)
    assert report.value('linear1d', 'spf-gs', 'jsd') <= 0.01
    assert report.value('linear1d', 'mapf', 'ess_fraction') >= 0.99
    assert report.value('linear1d', 'mbpf', 'ess_fraction') <= 0.05
    assert report.value('linear1d', 'marginal-target', 'jsd') == pytest.approx(0.29, abs=0.1)


def toy_report(name, filters, **extra):
    raw = dict(experiment=name, filters=filters, n_particles=1000, mc_runs=10, seed=1)
    raw.update(extra)
    return run_experiment(parse_config(raw), threads=None, progress=False)


@pytest.mark.slow
def test_quadratic_acceptance():
    report = toy_report('quadratic1d', ['spf-mpf'])
    assert report.value('quadratic1d', 'spf-mpf', 'jsd') <= 0.02
    assert report.value('quadratic1d', 'spf-mpf', 'ess_fraction') >= 0.90


@pytest.mark.slow
def test_cubic_acceptance():
    report = toy_report('cubic1d', ['spf-mpf', 'mapf'])
    assert report.value('cubic1d', 'spf-mpf', 'jsd') <= 0.01
    assert report.value('cubic1d', 'spf-mpf', 'ess_fraction') >= 0.85
    assert 0.55 <= report.value('cubic1d', 'mapf', 'ess_fraction') <= 0.90


@pytest.mark.slow
def test_bimodal_acceptance():
    report = toy_report('bimodal2d', ['spf-gs', 'spf-mpf'])
    assert report.value('bimodal2d', 'spf-gs', 'jsd') <= 0.02
    assert report.value('bimodal2d', 'spf-mpf', 'ess_fraction') >= 0.85


@pytest.mark.slow
def test_banana_acceptance():
    report = toy_report('banana2d-case1', ['spf-gs', 'spf-mpf'])
    assert report.value('banana2d-case1', 'spf-gs', 'jsd') <= 0.05
    assert report.value('banana2d-case1', 'spf-mpf', 'ess_fraction') >= 0.70
    report = toy_report('banana2d-case2', ['spf-gs', 'marginal-target'])
    assert report.value('banana2d-case2', 'marginal-target', 'jsd') >= 0.10
    assert report.value('banana2d-case2', 'spf-gs', 'jsd') <= 0.07


@pytest.mark.slow
def test_bearings_acceptance():
    report = toy_report('bearings-only', ['spf-gs'], n_particles=250, mc_runs=20,
                        sweep=dict(n_sensors=[4, 7]))
    for n in (4, 7):
        assert -0.5 <= report.value(f'bearings-only[n_sensors={n}]', 'spf-gs', 'log10_nees') <= 0.7
    assert (report.value('bearings-only[n_sensors=7]', 'spf-gs', 'rmse_median')
            <= report.value('bearings-only[n_sensors=4]', 'spf-gs', 'rmse_median'))


@pytest.mark.slow
def test_convoy_acceptance():
    report = toy_report('convoy', ['bootstrap-pf', 'spf-gs'], n_particles=250, mc_runs=10,
                        scenario=dict(steps=20), sweep=dict(n_vehicles=[2, 4]))

    def growth(name):
        return (report.value('convoy[n_vehicles=4]', name, 'rmse')
                / report.value('convoy[n_vehicles=2]', name, 'rmse'))
    assert growth('spf-gs') <= 2.0
    assert growth('bootstrap-pf') >= 2.0 * growth('spf-gs')
