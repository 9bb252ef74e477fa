"""Estimator-style entry point for the latent generative models.

``LatentScoreGenerator`` follows the fit/transform/sample conventions:
``fit(X)`` pretrains the VAE, fits the latent reference mixture when the
nonlinear objective is selected, and trains jointly; ``transform(X)``
returns encoder means, ``sample(n)`` decodes fresh draws from the
learned prior. Hyperparameters mirror ``TrainConfig`` one to one so
``get_params``/``set_params`` compose with the usual tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .datasets import Dataset, _assignment_from_labels
from .nets import GAUSSIAN, encode_np
from .objectives import MODE_LNDSM
from .samplers import SamplerConfig, decode_samples, default_t_end, sample_latents
from .training import TrainConfig, build_spec, train
from .validation import check_matrix, check_rng


class LatentScoreGenerator(BaseEstimator):
    """VAE with a score-model prior trained on the latent distribution.

    Parameters mirror :class:`lndsm.training.TrainConfig`; see there for
    semantics and per-mode defaults.
    """

    def __init__(self, mode=MODE_LNDSM, epochs=50, batch_size=60,
                 lr_vae=None, lr_score=3e-4, pretrain_epochs=200,
                 pretrain_lr=1e-3, seed=0, horizon=None, n_steps=100,
                 latent_dim=2, hidden=64, gmm_components=3, beta0=0.1,
                 beta1=20.0, likelihood=GAUSSIAN, sigma_x=0.1,
                 sampler_method="pf_ode", sampler_steps=100):
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_vae = lr_vae
        self.lr_score = lr_score
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.seed = seed
        self.horizon = horizon
        self.n_steps = n_steps
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.gmm_components = gmm_components
        self.beta0 = beta0
        self.beta1 = beta1
        self.likelihood = likelihood
        self.sigma_x = sigma_x
        self.sampler_method = sampler_method
        self.sampler_steps = sampler_steps

    def _config(self):
        return TrainConfig(
            mode=self.mode, epochs=self.epochs, batch_size=self.batch_size,
            lr_vae=self.lr_vae, lr_score=self.lr_score,
            pretrain_epochs=self.pretrain_epochs, pretrain_lr=self.pretrain_lr,
            seed=self.seed, horizon=self.horizon, n_steps=self.n_steps,
            latent_dim=self.latent_dim, hidden=self.hidden,
            gmm_components=self.gmm_components, beta0=self.beta0,
            beta1=self.beta1, likelihood=self.likelihood, sigma_x=self.sigma_x,
            sampler_method=self.sampler_method,
            sampler_steps=self.sampler_steps)

    def fit(self, X, y=None):
        X = check_matrix(X, "X", min_rows=self.batch_size)
        labels = np.zeros(X.shape[0], dtype=int) if y is None \
            else np.asarray(y, dtype=int)
        n_modes = int(labels.max()) + 1
        data = Dataset(kind="array", X=X, labels=labels, seed=self.seed,
                       n_modes=n_modes,
                       assignment=_assignment_from_labels(X, labels, n_modes))
        cfg = self._config()
        self.state_ = train(cfg, data)
        self.config_ = cfg
        return self

    def _require_fit(self):
        if not hasattr(self, "state_"):
            raise RuntimeError("call fit before using the model")

    def transform(self, X):
        """Encoder means of X in the latent space."""
        self._require_fit()
        X = check_matrix(X, "X", n_cols=self.state_.vae.data_dim)
        return encode_np(self.state_.vae, X)[0]

    def sample(self, n, rng=None, method=None, steps=None):
        """Decode n fresh draws from the learned latent prior."""
        self._require_fit()
        rng = check_rng(rng if rng is not None else self.seed)
        spec = build_spec(self.config_, self.state_.gmm)
        cfg = SamplerConfig(method=method or self.sampler_method,
                            steps=steps or self.sampler_steps,
                            t_end=default_t_end(spec))
        z = sample_latents(self.state_.score, spec, cfg, n, rng)
        if self.state_.vae is None:
            return z
        return decode_samples(self.state_.vae, z)
