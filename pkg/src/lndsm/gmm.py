"""Diagonal-covariance Gaussian mixtures used as structured reference laws.

Besides the usual fit/sample/score_samples estimator surface, the class
exposes the gradient and Hessian of the log density; the gradient is the
drift of the Langevin noising process that has the mixture as its
invariant distribution.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import NumericalError
from .validation import check_matrix, check_rng, check_vector

LOG_2PI = float(np.log(2.0 * np.pi))


class DiagonalGmm(BaseEstimator):
    """Gaussian mixture with per-dimension variances, fitted by EM.

    Parameters
    ----------
    n_components : number of mixture components.
    max_iter : EM iteration cap.
    tol : stop when the mean log-likelihood improves by less than this.
    var_floor : lower bound applied to every variance during fitting.
    seed : seeds k-means++ style initialisation.

    Fitted attributes: ``weights_`` (K,), ``means_`` (K, d),
    ``variances_`` (K, d), ``log_likelihoods_`` (per-iteration mean
    log-likelihood), ``n_iter_``.
    """

    def __init__(self, n_components=1, max_iter=200, tol=1e-6, var_floor=1e-6,
                 seed=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor = var_floor
        self.seed = seed

    @classmethod
    def from_params(cls, weights, means, variances):
        """Build an already-parameterised mixture (no fitting)."""
        means = check_matrix(np.atleast_2d(means), "means")
        k, d = means.shape
        weights = check_vector(weights, "weights", length=k)
        variances = check_matrix(np.atleast_2d(variances), "variances", n_cols=d)
        if abs(weights.sum() - 1.0) > 1e-12 or np.any(weights <= 0):
            raise ValueError("weights must be positive and sum to 1")
        if np.any(variances <= 0):
            raise ValueError("variances must be positive")
        model = cls(n_components=k)
        model.weights_ = weights
        model.means_ = means
        model.variances_ = variances
        model.log_likelihoods_ = []
        model.n_iter_ = 0
        return model

    # -- queries ---------------------------------------------------------

    @property
    def dim(self):
        return self.means_.shape[1]

    def _check_input(self, X):
        return check_matrix(X, "X", n_cols=self.dim)

    def _component_log_densities(self, X):
        # (n, K): log w_k + log N(x; mu_k, diag(v_k))
        diff = X[:, None, :] - self.means_[None, :, :]
        quad = np.sum(diff * diff / self.variances_[None, :, :], axis=2)
        logdet = np.sum(np.log(self.variances_), axis=1)
        return (np.log(self.weights_)[None, :]
                - 0.5 * (quad + logdet[None, :] + self.dim * LOG_2PI))

    def score_samples(self, X):
        """Log density of each row, evaluated via log-sum-exp."""
        a = self._component_log_densities(self._check_input(X))
        m = np.max(a, axis=1, keepdims=True)
        return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]

    def responsibilities(self, X):
        """Posterior component memberships, computed in log space."""
        a = self._component_log_densities(self._check_input(X))
        m = np.max(a, axis=1, keepdims=True)
        e = np.exp(a - m)
        return e / e.sum(axis=1, keepdims=True)

    def _resp_and_pulls(self, X):
        a = self._component_log_densities(X)
        a -= np.max(a, axis=1, keepdims=True)
        r = np.exp(a)
        r /= r.sum(axis=1, keepdims=True)
        pulls = (self.means_[None, :, :] - X[:, None, :]) / self.variances_[None, :, :]
        return r, pulls

    def log_density_grad(self, X):
        """Gradient of the log density at each row: sum_k r_k (mu_k - x)/v_k."""
        r, pulls = self._resp_and_pulls(self._check_input(X))
        return np.einsum("nk,nkd->nd", r, pulls)

    def log_density_grad_hess(self, X):
        """Gradient and per-row Hessian of the log density in one pass;
        skips input validation (hot path of the taped simulator)."""
        r, pulls = self._resp_and_pulls(X)
        grad = np.einsum("nk,nkd->nd", r, pulls)
        hess = np.einsum("nk,nkd,nke->nde", r, pulls, pulls)
        hess -= grad[:, :, None] * grad[:, None, :]
        inv_var = r @ (1.0 / self.variances_)
        idx = np.arange(self.dim)
        hess[:, idx, idx] -= inv_var
        return grad, hess

    def log_density_hessian(self, X):
        """Per-row Hessian of the log density, shape (n, d, d)."""
        return self.log_density_grad_hess(self._check_input(X))[1]

    def sample(self, n, rng=None, return_components=False):
        """Draw n points: categorical component choice, then Gaussian draw."""
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = check_rng(rng)
        comps = rng.choice(self.n_components, size=n, p=self.weights_)
        eps = rng.standard_normal((n, self.dim))
        X = self.means_[comps] + np.sqrt(self.variances_[comps]) * eps
        if return_components:
            return X, comps
        return X

    def entropy_mc(self, n, rng=None):
        """Monte-Carlo entropy estimate with its standard error."""
        if n < 2:
            raise ValueError("n must be >= 2")
        rng = check_rng(rng)
        vals = -self.score_samples(self.sample(n, rng))
        return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n))

    def mixture_moments(self):
        """Analytic mean and per-dimension variance of the mixture."""
        mean = self.weights_ @ self.means_
        second = self.weights_ @ (self.variances_ + self.means_ ** 2)
        return mean, second - mean ** 2

    # -- fitting ---------------------------------------------------------

    def _seed_means(self, X, rng):
        # k-means++ style: spread initial means by squared distance.
        n = X.shape[0]
        means = np.empty((self.n_components, X.shape[1]))
        means[0] = X[rng.integers(n)]
        d2 = np.sum((X - means[0]) ** 2, axis=1)
        for k in range(1, self.n_components):
            p = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
            means[k] = X[rng.choice(n, p=p)]
            d2 = np.minimum(d2, np.sum((X - means[k]) ** 2, axis=1))
        return means

    def fit(self, X, y=None):
        X = check_matrix(X, "X", min_rows=self.n_components)
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        n, d = X.shape
        rng = check_rng(self.seed)

        self.means_ = self._seed_means(X, rng)
        global_var = np.maximum(X.var(axis=0), self.var_floor)
        self.variances_ = np.tile(global_var, (self.n_components, 1))
        self.weights_ = np.full(self.n_components, 1.0 / self.n_components)

        self.log_likelihoods_ = []
        reseeds = np.zeros(self.n_components, dtype=int)
        prev_ll = -np.inf
        for it in range(self.max_iter):
            a = self._component_log_densities(X)
            m = np.max(a, axis=1, keepdims=True)
            log_norm = m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True))
            ll = float(np.mean(log_norm))
            self.log_likelihoods_.append(ll)
            r = np.exp(a - log_norm)

            counts = r.sum(axis=0)
            empty = np.flatnonzero(counts < 1e-10)
            if empty.size:
                for k in empty:
                    reseeds[k] += 1
                    if reseeds[k] > 3:
                        raise NumericalError(
                            f"component {k} stayed empty after 3 reseeds")
                    # Restart the dead component at the point farthest
                    # from every current mean.
                    d2 = np.min(np.sum(
                        (X[:, None, :] - self.means_[None, :, :]) ** 2, axis=2),
                        axis=1)
                    self.means_[k] = X[np.argmax(d2)]
                    self.variances_[k] = global_var
                continue

            self.weights_ = counts / n
            self.means_ = (r.T @ X) / counts[:, None]
            diff2 = (X[:, None, :] - self.means_[None, :, :]) ** 2
            self.variances_ = np.maximum(
                np.einsum("nk,nkd->kd", r, diff2) / counts[:, None],
                self.var_floor)

            if it > 0 and ll - prev_ll < self.tol:
                break
            prev_ll = ll
        self.n_iter_ = len(self.log_likelihoods_)
        return self
