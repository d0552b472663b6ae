"""
Dense linear-algebra helpers shared by every filter.

All functions accept stacks of matrices/vectors along leading axes, so a
whole particle cloud is processed in one call.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .utils import NotPositiveDefinite

LOG_2PI = np.log(2 * np.pi)


def symmetrize(m):
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def default_eig_floor(vals):
    """
    1e-8 * max(1, trace/dim) from the eigenvalues of each matrix.

    Only the positive part of the spectrum enters the trace, which equals the
    plain trace for PSD input and keeps the repair idempotent.
    """
    dim = vals.shape[-1]
    return 1e-8 * np.maximum(1.0, np.sum(np.maximum(vals, 0.0), axis=-1) / dim)


def cholesky_sqrt(m):
    """
    Lower-triangular factor L with L @ L.T == m.

    Raises:
        NotPositiveDefinite: when a pivot is not positive; regularize first.
    """
    try:
        return np.linalg.cholesky(symmetrize(m))
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err)) from None


def nearest_pd(m, eig_floor=None):
    """
    Eigenvalue-clamped repair of a symmetric matrix (stack).

    Every eigenvalue below `eig_floor` is raised to it; matrices that already
    satisfy the floor are returned untouched. `eig_floor` defaults to
    1e-8 * max(1, trace/dim) and may be a scalar or one value per matrix.
    """
    m = symmetrize(m)
    vals, vecs = np.linalg.eigh(m)
    if eig_floor is None:
        eig_floor = default_eig_floor(vals)
    floor = np.asarray(eig_floor, dtype=float)
    floor_b = floor[..., None] if floor.ndim else floor
    bad = np.any(vals < floor_b, axis=-1)
    if not np.any(bad):
        return m
    clamped = np.maximum(vals, floor_b)
    repaired = symmetrize((vecs * clamped[..., None, :]) @ np.swapaxes(vecs, -1, -2))
    if m.ndim == 2:
        return repaired
    return np.where(bad[..., None, None], repaired, m)


def clamp_psd(m):
    """Symmetrize and zero out negative eigenvalues (covariances starting at 0)."""
    m = symmetrize(m)
    vals, vecs = np.linalg.eigh(m)
    if np.all(vals >= 0):
        return m
    vals = np.maximum(vals, 0.0)
    return symmetrize((vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2))


def inv_spd(m):
    """Inverse of a symmetric positive-definite stack through its Cholesky factor."""
    L = cholesky_sqrt(m)
    eye = np.broadcast_to(np.eye(m.shape[-1]), L.shape)
    Linv = np.linalg.solve(L, eye)
    return symmetrize(np.swapaxes(Linv, -1, -2) @ Linv)


def gaussian_logpdf(x, mean, cov):
    """
    log N(x; mean, cov), broadcasting over leading axes.

    x, mean: (..., n); cov: (..., n, n).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    L = cholesky_sqrt(cov)
    diff = np.broadcast_to(x - mean, np.broadcast_shapes(x.shape, mean.shape))
    Lb = np.broadcast_to(L, diff.shape[:-1] + L.shape[-2:])
    z = np.linalg.solve(Lb, diff[..., None])[..., 0]
    logdet = 2 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    n = cov.shape[-1]
    return -0.5 * (np.sum(z ** 2, axis=-1) + logdet + n * LOG_2PI)


def gaussian_logpdf_matrix(x, means, covs, chunk_elems=4_000_000):
    """
    Pairwise log N(x_a; means_b, covs_b) as an (A, B) matrix.

    `covs` is either one (n, n) matrix shared by all components or a (B, n, n)
    stack. Rows of x are processed in chunks to bound memory.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    means = np.atleast_2d(np.asarray(means, dtype=float))
    covs = np.asarray(covs, dtype=float)
    n = x.shape[-1]
    L = cholesky_sqrt(covs)
    eye = np.broadcast_to(np.eye(n), L.shape)
    Linv = np.linalg.solve(L, eye)
    logdet = 2 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    const = -0.5 * (logdet + n * LOG_2PI)
    B = means.shape[0]
    rows = max(1, chunk_elems // max(1, B * n))
    out = np.empty((x.shape[0], B))
    for start in range(0, x.shape[0], rows):
        diff = x[start:start + rows, None, :] - means[None, :, :]
        if Linv.ndim == 2:
            z = diff @ Linv.T
        else:
            z = np.einsum('bij,abj->abi', Linv, diff)
        out[start:start + rows] = -0.5 * np.sum(z ** 2, axis=-1) + const
    return out


@dataclass
class GaussianMixture:
    """Weighted superposition of Gaussians: weights (N,), means (N, n), covs (N, n, n)."""
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    @property
    def dim(self):
        return self.means.shape[-1]

    def __len__(self):
        return len(self.weights)

    def logpdf(self, x):
        x = np.atleast_2d(x)
        with np.errstate(divide='ignore'):
            logw = np.log(self.weights)
        return logsumexp(gaussian_logpdf_matrix(x, self.means, self.covs) + logw, axis=1)

    def mean(self):
        return self.weights @ self.means

    def cov(self):
        mu = self.mean()
        diff = self.means - mu
        spread = np.einsum('i,ij,ik->jk', self.weights, diff, diff)
        return symmetrize(np.einsum('i,ijk->jk', self.weights, self.covs) + spread)

    def sample(self, size, rng):
        idx = rng.choice(len(self.weights), size=size, p=self.weights)
        L = cholesky_sqrt(nearest_pd(self.covs[idx]))
        z = rng.standard_normal((size, self.dim))
        return self.means[idx] + np.einsum('ijk,ik->ij', L, z)
