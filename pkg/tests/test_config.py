import json
import warnings

import pytest

from scripts.cli import PRESET_DIR
from scripts.config import FilterSpec, load_config, parse_config, unsupported_reason
from scripts.utils import ConfigError


def minimal(**extra):
    return {**dict(experiment='linear1d', filters=['ekf'], flow=dict(l_cap=100)), **extra}


@pytest.mark.parametrize('path', sorted(PRESET_DIR.glob('*.json')), ids=lambda p: p.stem)
def test_presets_validate(path):
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        config = load_config(path)
    assert config.experiment == path.stem
    assert config.comment


def test_defaults():
    config = parse_config(minimal())
    assert config.n_particles == 1000
    assert config.mc_runs == 100
    assert config.grid.points(1) == 2048 and config.grid.points(2) == 256
    assert config.grid.bins(2) == 64
    assert config.variants() == [('linear1d', config.variants()[0][1])]


@pytest.mark.parametrize('raw, key', [
    (minimal(colour='red'), 'colour'),
    (minimal(flow=dict(l_cap=100, stepsize=1)), 'flow.stepsize'),
    (minimal(scenario=dict(obs_cov=[[1.0]], gain=2)), 'scenario.gain'),
    (minimal(grid=dict(points_1d=100)), 'grid.bins_1d'),
    (minimal(output=dict(save_scenarios='yes')), 'output.save_scenarios'),
    (minimal(n_particles=1), 'n_particles'),
    (minimal(mc_runs=True), 'mc_runs'),
    (dict(experiment='linear1d', filters=[dict(name='ekf', options=dict(alpha=1.0))]),
     'filters[0].options.alpha'),
    (dict(experiment='linear1d', filters=['pf']), 'filters[0].name'),
    (dict(experiment='linear1d', filters=['ekf', 'ekf']), 'filters[1].name'),
    (dict(experiment='convoy', filters=['ekf']), 'filters[0].name'),
    (dict(experiment='bimodal2d', filters=['mapf']), 'filters[0].name'),
    (dict(experiment='bearings-only', filters=['marginal-target']), 'filters[0].name'),
    (minimal(flow=dict(epsilon=0.6)), 'flow.epsilon'),
    (minimal(flow=dict(method='rk4')), 'flow.method'),
    (minimal(flow=dict(l_cap=100, dlam_max=0)), 'flow.dlam_max'),
    (minimal(sweep=dict(obs_cov=[[[1.0]]], observation=[[1.0], [2.0]])), 'sweep'),
    (minimal(sweep=dict(observation=[])), 'sweep.observation'),
    (dict(filters=['ekf']), 'experiment'),
])
def test_errors_name_the_entry(raw, key):
    with pytest.raises(ConfigError) as err:
        parse_config(raw)
    assert err.value.key == key


def test_sweep_labels():
    config = parse_config(minimal(sweep=dict(observation=[[10.0], [30.0]])))
    labels = [label for label, _ in config.variants()]
    assert labels == ['linear1d[observation=[10.0]]', 'linear1d[observation=[30.0]]']
    assert config.variants()[1][1]['observation'] == [30.0]


def test_filter_options_reach_the_flow():
    raw = dict(experiment='linear1d', flow=dict(l_cap=100, epsilon=0.2),
               filters=[dict(name='spf-gs', options=dict(method='ozaki')), 'spf-mpf'])
    config = parse_config(raw)
    gs = config.flow_for(config.filters[0])
    assert (gs.method, gs.epsilon) == ('ozaki', 0.2)
    assert config.flow_for(config.filters[1]).method == 'expeuler'


def test_uncapped_flow_warns():
    with pytest.warns(UserWarning, match='l_cap'):
        parse_config(dict(experiment='linear1d', filters=['ekf'], flow=dict(l_cap=None)))


def test_overrides():
    config = parse_config(minimal())
    assert config.with_seed(7).seed == 7
    assert config.with_output_dir('elsewhere').output.dir == 'elsewhere'
    assert config.seed == 0


def test_support_table():
    assert unsupported_reason('spf-gs', 'convoy') is None
    assert unsupported_reason('ukf', 'bearings-only') is None
    assert unsupported_reason('mbpf', 'bimodal2d') is None
    assert unsupported_reason('mupf', 'bearings-only')
    assert FilterSpec('ukf').label == 'ukf'


def test_malformed_file(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"experiment": "linear1d",,}')
    with pytest.raises(ConfigError, match='line 1'):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / 'missing.json')


def test_load_round_trip(tmp_path):
    path = tmp_path / 'ok.json'
    path.write_text(json.dumps(minimal(seed=5, mc_runs=0)))
    config = load_config(path)
    assert (config.seed, config.mc_runs) == (5, 0)
