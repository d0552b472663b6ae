"""
Scoring: grid reference posteriors, Jensen-Shannon divergence, ESS, RMSE and NEES.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import rel_entr

from .linalg import cholesky_sqrt
from .utils import GridMismatch, GridTooCoarse

logger = logging.getLogger(__name__)

POINTS = {1: 2048, 2: 256}
BINS = {1: 64, 2: 64}
COARSE_POINTS = {1: 512, 2: 128}
LOG_CUTOFF = 40.0
BOUNDARY_TOL = 1e-4


@dataclass
class GridDensity:
    """
    Density sampled at the nodes of a uniform grid; `values` has one axis per
    state dimension.
    """
    axes: tuple
    values: np.ndarray

    @property
    def dim(self):
        return len(self.axes)

    @property
    def spacing(self):
        return np.array([ax[1] - ax[0] for ax in self.axes])

    @property
    def volume(self):
        return float(np.prod(self.spacing))

    def mesh(self):
        """Grid nodes as an (P, dim) array in C order."""
        grids = np.meshgrid(*self.axes, indexing='ij')
        return np.stack([g.ravel() for g in grids], axis=-1)

    def mass(self):
        return float(self.values.sum() * self.volume)

    def integral(self):
        out = self.values
        for ax in reversed(self.axes):
            out = trapezoid(out, ax, axis=-1)
        return float(out)

    def pmf(self):
        """Cell masses plus one trailing cell holding the mass off the grid."""
        cells = self.values.ravel() * self.volume
        return np.append(cells, max(0.0, 1.0 - cells.sum()))

    def rebin(self, bins):
        """Cell masses summed over blocks of nodes, `bins` blocks per axis, plus the overflow cell."""
        masses = self.values * self.volume
        for axis, ax in enumerate(self.axes):
            if len(ax) % bins:
                raise GridMismatch(f'{len(ax)} grid points do not split into {bins} bins')
            shape = masses.shape[:axis] + (bins, len(ax) // bins) + masses.shape[axis + 1:]
            masses = masses.reshape(shape).sum(axis=axis + 1)
        cells = masses.ravel()
        return np.append(cells, max(0.0, 1.0 - cells.sum()))

    def bin_edges(self, bins):
        edges = []
        for ax in self.axes:
            h = ax[1] - ax[0]
            step = len(ax) // bins
            edges.append(np.append(ax[::step] - h / 2, ax[-1] + h / 2))
        return edges

    def mean(self):
        p = self.values * self.volume
        p = p / p.sum()
        return np.array([np.sum(p * g) for g in np.meshgrid(*self.axes, indexing='ij')])

    def cov(self):
        p = (self.values * self.volume).ravel()
        p = p / p.sum()
        diff = self.mesh() - self.mean()
        return np.einsum('i,ij,ik->jk', p, diff, diff)

    def local_maxima(self):
        """Number of strict interior local maxima (1D)."""
        if self.dim != 1:
            raise ValueError('local_maxima is defined for 1D grids')
        v = self.values
        return int(np.sum((v[1:-1] > v[:-2]) & (v[1:-1] > v[2:])))


def grid_axes(lo, hi, points):
    return tuple(np.linspace(a, b, points) for a, b in zip(np.atleast_1d(lo), np.atleast_1d(hi)))


def evaluate_on_grid(log_density, axes, normalize=True):
    """
    Density exp(log_density) at the grid nodes. With `normalize` the values are
    max-shifted and divided by their trapezoid integral; otherwise returned as is.
    """
    dens = GridDensity(tuple(axes), None)
    logv = np.asarray(log_density(dens.mesh()), dtype=float).reshape([len(a) for a in axes])
    if normalize:
        finite = np.isfinite(logv)
        if not np.any(finite):
            raise GridTooCoarse('Density vanishes on the whole grid')
        values = np.exp(logv - logv[finite].max())
        dens.values = values
        dens.values = values / dens.integral()
    else:
        dens.values = np.exp(logv)
    return dens


def boundary_mass(density):
    mask = np.zeros(density.values.shape, dtype=bool)
    for axis in range(density.dim):
        index = [slice(None)] * density.dim
        index[axis] = 0
        mask[tuple(index)] = True
        index[axis] = -1
        mask[tuple(index)] = True
    return float(density.values[mask].sum() * density.volume)


def _support_box(log_density, lo, hi, points, cutoff, max_expand=4):
    """Bounding box of the nodes within `cutoff` of the maximum, widening the search box as needed."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    for _ in range(max_expand):
        axes = grid_axes(lo, hi, points)
        dens = GridDensity(axes, None)
        logv = np.asarray(log_density(dens.mesh()), dtype=float).reshape([points] * len(lo))
        keep = logv > np.max(logv[np.isfinite(logv)]) - cutoff
        idx = np.argwhere(keep)
        first, last = idx.min(axis=0), idx.max(axis=0)
        touches = np.any(first == 0) or np.any(last == points - 1)
        if not touches:
            step = (hi - lo) / (points - 1)
            return lo + first * step, lo + last * step, step
        center, half = (lo + hi) / 2, (hi - lo)
        lo, hi = center - half, center + half
    raise GridTooCoarse('Posterior support keeps reaching the search box')


def reference_posterior(model, prior, y, points=None, span=12.0, log_density=None):
    """
    Grid-quadrature posterior p(y|x) N(x; prior) for dim <= 2.

    A coarse pass over prior mean +/- span sigma locates the nodes within
    exp(-40) of the maximum; the fine grid covers their bounding box padded by
    10% and has 2048 (1D) or 256 x 256 (2D) nodes.

    Raises:
        GridTooCoarse: more than 1e-4 of the mass sits on the grid boundary.
    """
    dim = prior.dim
    if dim > 2:
        raise ValueError('Grid references are limited to two dimensions')
    if log_density is None:
        def log_density(x):
            return model.log_likelihood(y, x) + prior.logpdf(x)
    sigma = np.sqrt(np.diag(prior.cov))
    lo, hi, step = _support_box(log_density, prior.mean - span * sigma, prior.mean + span * sigma,
                                COARSE_POINTS[dim], LOG_CUTOFF)
    pad = np.maximum(0.1 * (hi - lo), step)
    dens = evaluate_on_grid(log_density, grid_axes(lo - pad, hi + pad, points or POINTS[dim]))
    edge = boundary_mass(dens)
    if edge > BOUNDARY_TOL:
        raise GridTooCoarse(f'Boundary mass {edge:.2e} exceeds {BOUNDARY_TOL}')
    return dens


def mixture_on_grid(mixture, reference):
    """Unnormalized mixture density at the reference nodes (mass off the grid lands in the overflow cell)."""
    return evaluate_on_grid(mixture.logpdf, reference.axes, normalize=False)


def gaussian_on_grid(mean, cov, reference):
    from .linalg import GaussianMixture
    mix = GaussianMixture(np.ones(1), np.atleast_2d(mean), np.atleast_2d(cov)[None])
    return mixture_on_grid(mix, reference)


def histogram_pmf(samples, weights, reference, bins=None):
    """
    Weighted histogram of samples on bins aligned with blocks of reference nodes,
    plus the overflow cell; comparable with `reference.rebin(bins)`.
    """
    bins = bins or BINS[reference.dim]
    samples = np.asarray(samples, dtype=float).reshape(len(samples), reference.dim)
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    hist, _ = np.histogramdd(samples, bins=reference.bin_edges(bins), weights=weights)
    cells = hist.ravel()
    return np.append(cells, max(0.0, 1.0 - cells.sum()))


def _as_pmf(p):
    if isinstance(p, GridDensity):
        p = p.pmf()
    p = np.clip(np.asarray(p, dtype=float).ravel(), 0.0, None)
    total = p.sum()
    if total <= 0:
        raise ValueError('Probability vector has no mass')
    return p / total


def jsd(p, q):
    """
    Jensen-Shannon divergence with base-2 logarithms, in [0, 1].

    p, q: probability vectors or GridDensity on the same grid.

    Raises:
        GridMismatch: the two inputs are not defined on the same cells.
    """
    if isinstance(p, GridDensity) and isinstance(q, GridDensity):
        if len(p.axes) != len(q.axes) or not all(
                a.shape == b.shape and np.allclose(a, b) for a, b in zip(p.axes, q.axes)):
            raise GridMismatch('Densities live on different grids')
    p, q = _as_pmf(p), _as_pmf(q)
    if p.shape != q.shape:
        raise GridMismatch(f'pmf sizes differ: {p.size} vs {q.size}')
    m = 0.5 * (p + q)
    value = 0.5 * (rel_entr(p, m).sum() + rel_entr(q, m).sum()) / np.log(2)
    return float(np.clip(value, 0.0, 1.0))


def ess(weights):
    """Effective sample size 1 / sum w^2 of normalized weights."""
    weights = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(weights ** 2))


def step_errors(estimates, covariances, truths, dims=None):
    """
    Squared error and NEES (divided by the number of compared components) at every step.

    Parameters:
        estimates, truths (T, n); covariances (T, n, n).
        dims (sequence, optional): state components to compare.

    Raises:
        NotPositiveDefinite: a covariance cannot be factorized.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    tru = np.atleast_2d(np.asarray(truths, dtype=float))
    cov = np.asarray(covariances, dtype=float).reshape(est.shape + (est.shape[-1],))
    if dims is not None:
        dims = np.asarray(dims)
        est, tru = est[:, dims], tru[:, dims]
        cov = cov[:, dims][:, :, dims]
    err = est - tru
    L = cholesky_sqrt(cov)
    z = np.linalg.solve(L, err[..., None])[..., 0]
    return np.sum(err ** 2, axis=-1), np.sum(z ** 2, axis=-1) / err.shape[-1]


def rmse_nees(estimates, covariances, truths, dims=None):
    """
    Root-mean-square error and normalized estimation error squared.

    NEES is averaged over the sequence and divided by the number of compared
    components, so a consistent estimator scores 1.

    Returns:
        (rmse, nees)
    """
    sq, nees = step_errors(estimates, covariances, truths, dims)
    return float(np.sqrt(np.mean(sq))), float(np.mean(nees))
