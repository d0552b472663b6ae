"""
Monte Carlo experiment runner.

Every run simulates one scenario shared by all filters, filters it with each
configured method and scores the result. Runs are independent and spread over
a joblib worker pool; aggregation happens afterwards in run order, so reports
do not depend on the worker count.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from .baselines import (GaussianBelief, ParticleCloud, UnscentedTransform, bootstrap_pf_step,
                        ekf_step, marginal_pf_step, ukf_step)
from .evaluation import (evaluate_on_grid, gaussian_on_grid, histogram_pmf, jsd, mixture_on_grid,
                         reference_posterior, step_errors)
from .models import one_step_prior
from .scenarios import TOYS, build_model, build_scenario, observation_table
from .spf_gs import GsCloud, spf_gs_step
from .spf_mpf import MpfCloud, empirical_target_log_density, spf_mpf_step
from .utils import SpflowError, make_rng, resolve_threads, save_scenarios, spawn_seeds

logger = logging.getLogger(__name__)

CSV_COLUMNS = ('experiment', 'filter', 'metric', 'mean', 'stderr', 'mc_runs', 'n_particles', 'seed')
METRICS = ('jsd', 'ess_fraction', 'enm_fraction', 'rmse', 'rmse_median', 'nees', 'log10_nees',
           'wall_time')
# failures of a single (run, filter) unit that do not abort the experiment
RUN_ERRORS = (SpflowError, np.linalg.LinAlgError, ValueError)


def initial_state(name, prior, n_particles, rng):
    if name == 'spf-gs':
        return GsCloud.from_prior(prior, n_particles, rng)
    if name == 'spf-mpf':
        return MpfCloud.from_prior(prior, n_particles, rng)
    if name in ('ekf', 'ukf'):
        return GaussianBelief(prior.mean, prior.cov)
    return ParticleCloud.from_prior(prior, n_particles, rng)


def filter_step(spec, state, y, model, flow, rng, prior=None):
    """One cycle of the filter named by `spec`."""
    name, options = spec.name, spec.options
    if name == 'spf-gs':
        return spf_gs_step(state, y, model, prior, flow, rng)
    if name == 'spf-mpf':
        return spf_mpf_step(state, y, model, prior, flow, rng)
    if name == 'ekf':
        return ekf_step(state, y, model)
    if name == 'ukf':
        return ukf_step(state, y, model, UnscentedTransform(**options))
    if name == 'bootstrap-pf':
        return bootstrap_pf_step(state, y, model, rng, **options)
    transform = UnscentedTransform(**options) if name == 'mupf' else None
    return marginal_pf_step(state, y, model, name, rng, transform)


def moments(state):
    if isinstance(state, GaussianBelief):
        return state.mean, state.cov
    return state.mean(), state.cov()


def density_pmfs(name, state, reference, bins):
    """
    Filter and reference probability vectors on a common set of cells.

    Mixtures and Gaussians are evaluated at the reference nodes; sample-based
    filters are histogrammed on blocks of nodes against the rebinned reference.
    """
    if name == 'spf-gs':
        return mixture_on_grid(state.mixture(), reference).pmf(), reference.pmf()
    if name in ('ekf', 'ukf'):
        return gaussian_on_grid(state.mean, state.cov, reference).pmf(), reference.pmf()
    weights = state.importance if name == 'spf-mpf' else state.weights
    return histogram_pmf(state.particles, weights, reference, bins), reference.rebin(bins)


def marginal_target_jsd(state, scenario, reference):
    """JSD of the empirical marginal target built on the prior particles."""
    y = scenario.observations[0]

    def log_density(x):
        return empirical_target_log_density(x, state.particles, state.weights, scenario.model, y)

    target = evaluate_on_grid(log_density, reference.axes)
    return jsd(target.pmf(), reference.pmf())


def reference_for(experiment, params, grid):
    """Grid reference posterior of a single-cycle toy."""
    model, prev, y = build_model(experiment, params)
    prior = one_step_prior(model, prev)
    return reference_posterior(model, prior, y, points=grid.points(prior.dim))


def run_filter(spec, scenario, config, seed, reference=None):
    """
    Filter one scenario and score it.

    Returns:
        (metrics, series): scalar metrics of the run and per-step arrays.
    """
    rng = make_rng(seed)
    n = config.n_particles
    flow = config.flow_for(spec)
    start = time.perf_counter()
    state = initial_state(spec.name, scenario.initial, n, rng)
    metrics, series = {}, {}

    if spec.name == 'marginal-target':
        metrics['jsd'] = marginal_target_jsd(state, scenario, reference)
        metrics['wall_time'] = time.perf_counter() - start
        return metrics, series

    ess, enm, estimates, covs = [], [], [], []
    for y in scenario.observations:
        state = filter_step(spec, state, y, scenario.model, flow, rng, scenario.cycle_prior)
        info = getattr(state, 'info', {})
        if 'ess' in info:
            ess.append(info['ess'] / n)
        if 'enm' in info:
            enm.append(info['enm'] / n)
        m, P = moments(state)
        estimates.append(m)
        covs.append(P)

    if scenario.single_cycle:
        metrics['jsd'] = jsd(*density_pmfs(spec.name, state, reference, config.grid.bins(reference.dim)))
    else:
        sq, nees = step_errors(estimates, covs, scenario.truths, scenario.position_dims())
        metrics['rmse'] = float(np.sqrt(np.mean(sq)))
        metrics['nees'] = float(np.mean(nees))
        series['squared_error'] = sq
        series['nees'] = nees
    if ess:
        metrics['ess_fraction'] = float(np.mean(ess))
        series['ess_fraction'] = np.array(ess)
    if enm:
        metrics['enm_fraction'] = float(np.mean(enm))
        series['enm_fraction'] = np.array(enm)
    metrics['wall_time'] = time.perf_counter() - start
    return metrics, series


@dataclass
class RunResult:
    run: int
    results: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    truths: np.ndarray = None
    observations: np.ndarray = None


def _failure(run, name, err):
    return dict(run=run, filter=name, error=type(err).__name__, message=str(err))


def run_single(run, experiment, params, config, seed, reference=None, keep_scenario=False):
    """
    One Monte Carlo run: a shared scenario and every configured filter.

    Errors of the scenario or of a single filter are recorded and do not abort
    the other units.
    """
    children = spawn_seeds(seed, 1 + len(config.filters))
    out = RunResult(run)
    try:
        scenario = build_scenario(experiment, params, children[0])
    except RUN_ERRORS as err:
        logger.warning('Run %d: scenario failed: %s', run, err)
        out.failures.append(_failure(run, 'scenario', err))
        return out
    if keep_scenario:
        out.truths = scenario.truths
        out.observations = observation_table(scenario.observations)
    for spec, child in zip(config.filters, children[1:]):
        try:
            out.results[spec.name] = run_filter(spec, scenario, config, child, reference)
        except RUN_ERRORS as err:
            logger.warning('Run %d: %s failed: %s', run, spec.name, err)
            out.failures.append(_failure(run, spec.name, err))
    return out


def _stderr(values):
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def summarize(values_by_metric, include_timing=False):
    """(mean, standard error, run count) of every metric over the runs, in METRICS order."""
    out = {}
    for metric in METRICS:
        if metric == 'rmse_median':
            values = values_by_metric.get('rmse', [])
        elif metric == 'log10_nees':
            values = np.log10(values_by_metric.get('nees', []))
        else:
            values = values_by_metric.get(metric, [])
        if len(values) == 0 or (metric == 'wall_time' and not include_timing):
            continue
        values = np.asarray(values, dtype=float)
        if metric == 'rmse_median':
            # normal-approximation standard error of the median
            out[metric] = (float(np.median(values)), float(np.sqrt(np.pi / 2) * _stderr(values)),
                           len(values))
        else:
            out[metric] = (float(np.mean(values)), _stderr(values), len(values))
    return out


def _mean_series(arrays, key):
    if key == 'squared_error':
        return 'rmse', np.sqrt(np.mean(arrays, axis=0))
    return key, np.mean(arrays, axis=0)


@dataclass
class RunReport:
    """
    Aggregated metrics of an experiment.

    rows: one dict per (experiment variant, filter, metric) with the CSV columns.
    series: per variant and filter, per-step averages over the runs.
    failures: per (run, filter) errors with the variant label.
    """
    rows: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=list(CSV_COLUMNS))

    def to_dict(self):
        return dict(metadata=self.metadata, rows=self.rows, series=self.series, failures=self.failures)

    def value(self, experiment, name, metric):
        for row in self.rows:
            if (row['experiment'], row['filter'], row['metric']) == (experiment, name, metric):
                return row['mean']
        raise KeyError((experiment, name, metric))

    def add_variant(self, label, results, config):
        for spec in config.filters:
            runs = [r.results[spec.name] for r in results if spec.name in r.results]
            if not runs:
                continue
            values = {}
            for metrics, _ in runs:
                for key, value in metrics.items():
                    values.setdefault(key, []).append(value)
            for metric, (mean, stderr, count) in summarize(values, config.output.include_timing).items():
                self.rows.append(dict(experiment=label, filter=spec.name, metric=metric, mean=mean,
                                      stderr=stderr, mc_runs=count,
                                      n_particles=config.n_particles, seed=config.seed))
            steps = {}
            for _, series in runs:
                for key, value in series.items():
                    steps.setdefault(key, []).append(value)
            self.series.setdefault(label, {})[spec.name] = {
                name: values.tolist() for name, values in
                (_mean_series(np.stack(v), k) for k, v in sorted(steps.items()))}
        for r in results:
            self.failures.extend(dict(f, experiment=label) for f in r.failures)


def run_experiment(config, threads=None, progress=True):
    """
    Run every experiment variant of a config.

    Parameters:
        config (ScenarioConfig): validated configuration.
        threads (int, optional): worker count; $SPFLOW_THREADS or all cores otherwise.
        progress (bool): show a tqdm bar over the runs.

    Returns:
        RunReport; empty when `mc_runs` is 0.
    """
    n_jobs = resolve_threads(threads)
    report = RunReport(metadata=dict(experiment=config.experiment, seed=config.seed,
                                     n_particles=config.n_particles, mc_runs=config.mc_runs,
                                     filters=[s.name for s in config.filters],
                                     comment=config.comment))
    if config.mc_runs == 0:
        logger.info('No Monte Carlo runs requested')
        return report
    keep = config.output.save_scenarios
    for label, params in config.variants():
        reference = None
        if config.experiment in TOYS:
            reference = reference_for(config.experiment, params, config.grid)
        seeds = spawn_seeds(config.seed, config.mc_runs)
        logger.info('%s: %d runs x %d filters on %d workers', label, config.mc_runs,
                    len(config.filters), n_jobs)
        results = Parallel(n_jobs=n_jobs)(
            delayed(run_single)(run, config.experiment, params, config, seeds[run], reference, keep)
            for run in tqdm(range(config.mc_runs), desc=label, disable=not progress))
        report.add_variant(label, results, config)
        done = [r for r in results if r.truths is not None]
        if done:
            path = Path(config.output.dir) / 'scenarios.h5'
            path.parent.mkdir(parents=True, exist_ok=True)
            save_scenarios(path, label, [r.truths for r in done], [r.observations for r in done],
                           len(done[0].truths[0]))
    if report.failures:
        logger.warning('%d filter runs failed', len(report.failures))
    return report


def write_csv(report, path):
    """One row per (experiment, filter, metric); floats with 9 significant digits."""
    report.to_frame().to_csv(path, index=False, float_format='%.9g')


def write_json(report, path):
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + '\n')


def write_report(report, config):
    out = Path(config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(report, out / config.output.csv)
    write_json(report, out / config.output.json)
    logger.info('Wrote %s and %s', out / config.output.csv, out / config.output.json)
    return out / config.output.csv, out / config.output.json
