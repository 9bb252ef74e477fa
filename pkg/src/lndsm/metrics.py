"""Sample-quality metrics: mode balance, sliced distances, feature-space
Frechet distance and a responsibility-based diversity score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericalError
from .validation import check_matrix, check_rng


@dataclass(frozen=True)
class ModeFractions:
    counts: np.ndarray

    @property
    def fractions(self):
        return self.counts / self.counts.sum()

    @classmethod
    def from_labels(cls, labels, n_modes):
        counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_modes)
        return cls(counts=counts.astype(np.float64))


def assign_modes(gmm, X):
    """Hard mode assignment: argmax mixture responsibility."""
    return np.argmax(gmm.responsibilities(X), axis=1)


def mode_fraction_kl(reference_fracs, generated_fracs, smoothing=1e-6):
    """KL(reference || generated) after additive smoothing."""
    p = np.asarray(reference_fracs, dtype=np.float64)
    q = np.asarray(generated_fracs, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("fraction vectors must have equal length")
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    p = (p + smoothing) / (p + smoothing).sum()
    q = (q + smoothing) / (q + smoothing).sum()
    return float(np.sum(p * (np.log(p) - np.log(q))))


def _wasserstein_1d(a, b):
    """Exact 2-Wasserstein between two 1-D empirical distributions."""
    a = np.sort(a)
    b = np.sort(b)
    n, m = a.shape[0], b.shape[0]
    if n == m:
        return float(np.sqrt(np.mean((a - b) ** 2)))
    # Unequal sizes: integrate the squared quantile gap over the merged
    # breakpoints, where both quantile functions are piecewise constant.
    breaks = np.union1d(np.arange(1, n) / n, np.arange(1, m) / m)
    edges = np.concatenate([[0.0], breaks, [1.0]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    qa = a[np.minimum((mids * n).astype(int), n - 1)]
    qb = b[np.minimum((mids * m).astype(int), m - 1)]
    return float(np.sqrt(np.sum(np.diff(edges) * (qa - qb) ** 2)))


def sliced_wasserstein(a, b, projections=128, rng=None):
    """Mean 1-D 2-Wasserstein distance over random unit projections."""
    a = check_matrix(a, "a")
    b = check_matrix(b, "b", n_cols=a.shape[1])
    rng = check_rng(rng)
    dirs = rng.standard_normal((projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([_wasserstein_1d(a @ u, b @ u) for u in dirs]))


def _psd_sqrt(mat):
    """Symmetric PSD square root by eigendecomposition, flooring
    eigenvalues at zero; clearly negative spectra signal failure."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    scale = max(np.max(np.abs(vals)), 1.0)
    if np.min(vals) < -1e-8 * scale:
        raise NumericalError("matrix not PSD after flooring")
    vals = np.maximum(vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mean_a, cov_a, mean_b, cov_b):
    """Frechet distance between two Gaussians from their moments."""
    diff = np.asarray(mean_a) - np.asarray(mean_b)
    root_a = _psd_sqrt(np.atleast_2d(cov_a))
    cross = _psd_sqrt(root_a @ np.atleast_2d(cov_b) @ root_a)
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b)
                 - 2.0 * np.trace(cross))


@dataclass(frozen=True)
class FixedRandomFeatures:
    """Frozen random projection + smooth nonlinearity, so the feature
    space is reproducible without training anything."""

    in_dim: int
    n_features: int = 64
    seed: int = 17

    def __call__(self, X):
        X = check_matrix(X, "X", n_cols=self.in_dim)
        rng = np.random.default_rng(self.seed)
        w = rng.standard_normal((self.in_dim, self.n_features)) / np.sqrt(self.in_dim)
        b = rng.standard_normal(self.n_features)
        return ad._silu_np(X @ w + b)


def frechet_surrogate(a, b, feature_map):
    """Frechet distance between feature-space Gaussian fits of a and b."""
    fa = feature_map(a)
    fb = feature_map(b)
    return frechet_gaussian(fa.mean(axis=0), np.cov(fa, rowvar=False),
                            fb.mean(axis=0), np.cov(fb, rowvar=False))


def inception_surrogate(samples, gmm):
    """exp(E_z[KL(r(.|z) || mean r)]) over mixture responsibilities.

    Collapse to one component gives 1; a balanced, confidently assigned
    batch over K separated components approaches K.
    """
    r = gmm.responsibilities(samples)
    r_bar = r.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(r > 0, r * (np.log(np.where(r > 0, r, 1.0))
                                     - np.log(r_bar)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))
