"""
JSON experiment configuration.

A config names one experiment, the filters to compare and the Monte Carlo
settings; `scenario` overrides the experiment's default parameters and `sweep`
zips lists of overrides into several experiment variants. Unknown keys at any
level are rejected with the dotted path of the entry.
"""
import json
import logging
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .flow import METHODS, FlowConfig
from .scenarios import EXPERIMENTS, TOYS, scenario_parameters
from .utils import ConfigError, InvalidPrecision, convert_dict_to_list_of_dicts

logger = logging.getLogger(__name__)

FILTERS = ('spf-gs', 'spf-mpf', 'ekf', 'ukf', 'bootstrap-pf', 'mbpf', 'mepf', 'mupf', 'mapf',
           'marginal-target')

_FLOW_KEYS = tuple(f.name for f in fields(FlowConfig))
_UT_KEYS = ('alpha', 'beta', 'kappa')
FILTER_OPTIONS = {
    'spf-gs': _FLOW_KEYS,
    'spf-mpf': _FLOW_KEYS,
    'ekf': (),
    'ukf': _UT_KEYS,
    'bootstrap-pf': ('ess_threshold',),
    'mbpf': (),
    'mepf': (),
    'mupf': _UT_KEYS,
    'mapf': (),
    'marginal-target': (),
}

# experiments without an additive Gaussian likelihood
_MIXTURE_LIKELIHOOD = ('bimodal2d', 'bearings-only', 'convoy')


def unsupported_reason(name, experiment):
    """Why filter `name` cannot run on `experiment`, or None."""
    if name == 'marginal-target' and experiment not in TOYS:
        return 'the grid-evaluated marginal target is limited to the single-cycle toys'
    if name in ('ekf', 'ukf') and experiment in ('bimodal2d', 'convoy'):
        return 'no per-sensor Gaussian measurement blocks for this likelihood'
    if name in ('mepf', 'mupf', 'mapf') and experiment in _MIXTURE_LIKELIHOOD:
        return 'requires an additive Gaussian likelihood'
    return None


@dataclass(frozen=True)
class FilterSpec:
    name: str
    options: dict = field(default_factory=dict)

    @property
    def label(self):
        return self.name


@dataclass(frozen=True)
class GridConfig:
    points_1d: int = 2048
    points_2d: int = 256
    bins_1d: int = 64
    bins_2d: int = 64

    def points(self, dim):
        return self.points_1d if dim == 1 else self.points_2d

    def bins(self, dim):
        return self.bins_1d if dim == 1 else self.bins_2d


@dataclass(frozen=True)
class OutputConfig:
    dir: str = 'out'
    csv: str = 'report.csv'
    json: str = 'report.json'
    save_scenarios: bool = False
    include_timing: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    experiment: str
    filters: tuple
    n_particles: int = 1000
    mc_runs: int = 100
    seed: int = 0
    flow: FlowConfig = field(default_factory=FlowConfig)
    scenario: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    grid: GridConfig = field(default_factory=GridConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    comment: str = ''

    def variants(self):
        """
        Experiment variants as (label, parameters). Without a sweep there is a
        single variant labelled by the experiment name.
        """
        if not self.sweep:
            return [(self.experiment, scenario_parameters(self.experiment, self.scenario))]
        out = []
        for overrides in convert_dict_to_list_of_dicts(self.sweep):
            tag = ','.join(f'{k}={v}' for k, v in overrides.items())
            params = scenario_parameters(self.experiment, {**self.scenario, **overrides})
            out.append((f'{self.experiment}[{tag}]', params))
        return out

    def flow_for(self, spec):
        """Flow options of a filter: the shared `flow` section with its own overrides."""
        flow_options = {k: v for k, v in spec.options.items() if k in _FLOW_KEYS}
        return _flow_config({**_asdict(self.flow), **flow_options}, f'filters.{spec.name}')

    def with_seed(self, seed):
        return replace(self, seed=seed)

    def with_output_dir(self, path):
        return replace(self, output=replace(self.output, dir=str(path)))


def _asdict(flow):
    return {f.name: getattr(flow, f.name) for f in fields(flow)}


def _check_keys(section, allowed, prefix):
    if not isinstance(section, dict):
        raise ConfigError(prefix, f'expected an object, got {type(section).__name__}')
    for key in section:
        if key not in allowed:
            raise ConfigError(f'{prefix}.{key}' if prefix else key, 'unknown key')


def _integer(value, key, minimum):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f'expected an integer, got {value!r}')
    if value < minimum:
        raise ConfigError(key, f'must be >= {minimum}, got {value}')
    return value


def _boolean(value, key):
    if not isinstance(value, bool):
        raise ConfigError(key, f'expected true or false, got {value!r}')
    return value


def _flow_config(options, prefix):
    if options.get('method', METHODS[0]) not in METHODS:
        raise ConfigError(f'{prefix}.method', f'expected one of {METHODS}, got {options["method"]!r}')
    if options.get('prior_mode', 'local') not in ('local', 'global'):
        raise ConfigError(f'{prefix}.prior_mode', f'expected local or global, got {options["prior_mode"]!r}')
    dlam_max = options.get('dlam_max', 0.5)
    if dlam_max is not None and (isinstance(dlam_max, bool) or not isinstance(dlam_max, (int, float))
                                 or dlam_max <= 0):
        raise ConfigError(f'{prefix}.dlam_max', f'expected a positive number or null, got {dlam_max!r}')
    try:
        return FlowConfig(**options)
    except InvalidPrecision as err:
        raise ConfigError(f'{prefix}.epsilon', str(err)) from None
    except TypeError as err:
        raise ConfigError(prefix, str(err)) from None


def _parse_filters(raw, experiment):
    if isinstance(raw, str):
        raw = [raw]
    if not isinstance(raw, list) or not raw:
        raise ConfigError('filters', 'expected a non-empty list')
    specs = []
    for i, entry in enumerate(raw):
        key = f'filters[{i}]'
        if isinstance(entry, str):
            entry = dict(name=entry)
        _check_keys(entry, ('name', 'options'), key)
        name = entry.get('name')
        if name not in FILTERS:
            raise ConfigError(f'{key}.name', f'unknown filter {name!r}, expected one of {FILTERS}')
        options = entry.get('options', {})
        _check_keys(options, FILTER_OPTIONS[name], f'{key}.options')
        reason = unsupported_reason(name, experiment)
        if reason:
            raise ConfigError(f'{key}.name', f'{name} cannot run on {experiment}: {reason}')
        if any(s.name == name for s in specs):
            raise ConfigError(f'{key}.name', f'{name} listed twice')
        specs.append(FilterSpec(name, dict(options)))
    return tuple(specs)


def parse_config(raw):
    """
    Validate a decoded JSON config and build the ScenarioConfig.

    Raises:
        ConfigError: unknown key, wrong type or out-of-range value.
    """
    allowed = ('experiment', 'filters', 'n_particles', 'mc_runs', 'seed', 'flow', 'scenario',
               'sweep', 'grid', 'output', 'comment')
    _check_keys(raw, allowed, '')
    if 'experiment' not in raw:
        raise ConfigError('experiment', 'missing')
    experiment = raw['experiment']
    if experiment not in EXPERIMENTS:
        raise ConfigError('experiment', f'unknown experiment {experiment!r}, expected one of {EXPERIMENTS}')
    filters = _parse_filters(raw.get('filters', ['spf-gs']), experiment)
    n_particles = _integer(raw.get('n_particles', 1000), 'n_particles', 2)
    mc_runs = _integer(raw.get('mc_runs', 100), 'mc_runs', 0)
    seed = _integer(raw.get('seed', 0), 'seed', 0)

    flow_raw = raw.get('flow', {})
    _check_keys(flow_raw, _FLOW_KEYS, 'flow')
    flow = _flow_config(flow_raw, 'flow')
    if flow.l_cap is None:
        warnings.warn('flow.l_cap is null: pseudo-time steps are not capped')

    scenario = raw.get('scenario', {})
    _check_keys(scenario, scenario_parameters(experiment), 'scenario')

    sweep = raw.get('sweep', {})
    _check_keys(sweep, scenario_parameters(experiment), 'sweep')
    for key, values in sweep.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f'sweep.{key}', 'expected a non-empty list of values')
    if len({len(v) for v in sweep.values()}) > 1:
        raise ConfigError('sweep', 'all swept lists must have the same length')

    grid_raw = raw.get('grid', {})
    _check_keys(grid_raw, tuple(f.name for f in fields(GridConfig)), 'grid')
    grid = GridConfig(**{k: _integer(v, f'grid.{k}', 2) for k, v in grid_raw.items()})
    for dim in (1, 2):
        if grid.points(dim) % grid.bins(dim):
            raise ConfigError(f'grid.bins_{dim}d',
                              f'{grid.points(dim)} grid points do not split into {grid.bins(dim)} bins')

    out_raw = raw.get('output', {})
    _check_keys(out_raw, tuple(f.name for f in fields(OutputConfig)), 'output')
    for key in ('save_scenarios', 'include_timing'):
        if key in out_raw:
            _boolean(out_raw[key], f'output.{key}')
    output = OutputConfig(**out_raw)

    comment = raw.get('comment', '')
    if not isinstance(comment, str):
        raise ConfigError('comment', 'expected a string')

    config = ScenarioConfig(experiment=experiment, filters=filters, n_particles=n_particles,
                            mc_runs=mc_runs, seed=seed, flow=flow, scenario=dict(scenario),
                            sweep=dict(sweep), grid=grid, output=output, comment=comment)
    for spec in filters:
        config.flow_for(spec)
    try:
        config.variants()
    except ValueError as err:
        raise ConfigError('sweep', str(err)) from None
    return config


def load_config(path):
    """
    Read and validate a JSON config file.

    Raises:
        ConfigError: unreadable file, malformed JSON or invalid content.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError('config', f'cannot read {path}: {err.strerror}') from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError('config', f'malformed JSON in {path} at line {err.lineno} column {err.colno}: {err.msg}') from None
    config = parse_config(raw)
    logger.debug('Loaded %s: %s with %d filters', path, config.experiment, len(config.filters))
    return config
