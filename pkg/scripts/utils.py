import logging
import os
import sys

import h5py
import numpy as np
from joblib import cpu_count

logger = logging.getLogger(__name__)

THREADS_ENV = 'SPFLOW_THREADS'


class SpflowError(Exception):
    """Base class of every error raised by the filtering toolkit."""


class NotPositiveDefinite(SpflowError):
    pass


class DegenerateGap(SpflowError):
    """Two vehicles overlap: a net gap is not positive."""


class CombinatorialLimit(SpflowError):
    pass


class MapSearchDiverged(SpflowError):
    pass


class InvalidPrecision(SpflowError):
    pass


class AllWeightsZero(SpflowError):
    """Every weight underflowed; the filter has diverged."""


class Underflow(SpflowError):
    pass


class GridTooCoarse(SpflowError):
    pass


class GridMismatch(SpflowError):
    pass


class ConfigError(SpflowError):
    """Invalid configuration. `key` is the dotted path of the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f'{key}: {message}' if key else message)


def make_rng(seed):
    """
    Counter-based generator for a seed or a SeedSequence.

    Parameters:
        seed (int | np.random.SeedSequence): entropy source.

    Returns:
        np.random.Generator backed by Philox.
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def spawn_seeds(seed, n):
    """Children of a seed; a SeedSequence argument is left untouched, so repeated calls agree."""
    if isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
        return seed.spawn(n)
    return np.random.SeedSequence(seed).spawn(n)


def resolve_threads(threads=None):
    """Worker count: explicit value, then $SPFLOW_THREADS, then every core."""
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigError(THREADS_ENV, f'expected an integer, got {env!r}')
    if threads is None or threads <= 0:
        return cpu_count()
    return threads


def setup_logging(verbosity=0):
    level = {-1: logging.WARNING, 0: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
                        force=True)


def wrap_angle(a):
    """Map angles (radians) into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2 * np.pi)


def wrap_interval(a, period):
    """Map displacements into (-period/2, period/2]."""
    half = 0.5 * period
    return half - np.mod(half - np.asarray(a, dtype=float), period)


def convert_dict_to_list_of_dicts(input_dict):
    """
    Convert a dictionary whose keys contain arrays of N values to a list of N dictionaries whose keys contain a single value.

    Parameters:
        input_dict (dict): The input dictionary with keys containing arrays of N values.

    Returns:
        list: A list of N dictionaries, each with keys containing a single value.
    """
    lengths = {len(v) for v in input_dict.values()}
    if len(lengths) > 1:
        raise ValueError(f'All value lists must share one length, got {sorted(lengths)}')
    keys = input_dict.keys()
    values_list = zip(*input_dict.values())
    return [dict(zip(keys, vals)) for vals in values_list]


def save_scenarios(path, label, truths, observations, n_states):
    """
    Write the simulated truths and observations of every MC run to an HDF5 file.

    Observations are ragged (missed detections and clutter), so each run's scans
    are flattened into one (n, 3) table of (step, sensor, value...) rows.
    """
    with h5py.File(path, 'a', libver='latest') as file:
        if label in file:
            del file[label]
        group = file.create_group(label)
        group.attrs['n_states'] = n_states
        group.create_dataset(name='Truths', data=np.stack(truths), track_times=False)
        for run, table in enumerate(observations):
            dset = group.create_dataset(name=f'Observations/{run:04d}', data=table,
                                        track_times=False)
            dset.attrs['names'] = ['step', 'sensor'] + [f'y{i}' for i in range(table.shape[1] - 2)]
    logger.info('Saved %d scenario runs of %s to %s', len(truths), label, path)
