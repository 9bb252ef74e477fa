"""Generation: reverse-time SDE and probability-flow ODE integrators.

Both integrators run on plain numpy (no tape) from an initial draw at
the terminal time: the reference mixture for Langevin dynamics, the
standard normal for the variance-preserving process.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .nets import decode_np
from .objectives import as_score_fn
from .sde import LANGEVIN, VP, diffusion_coeff, drift
from .validation import check_rng


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "reverse_sde"     # "reverse_sde" | "pf_ode"
    steps: int = 200
    t_end: float = 0.0

    def __post_init__(self):
        if self.method not in ("reverse_sde", "pf_ode"):
            raise ValueError(f"unknown sampler method {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")


def default_t_end(spec):
    """Early stop: 0 for Langevin, 0.01 for VP (kernel blows up at 0)."""
    return 0.0 if spec.kind == LANGEVIN else 0.01


def _initial_draw(spec, n, dim, rng):
    if spec.kind == LANGEVIN:
        return spec.reference.sample(n, rng)
    return rng.standard_normal((n, dim))


def _check_state(z, k):
    if not np.all(np.isfinite(z)):
        raise NumericalError(f"non-finite state at reverse step {k}")


def integrate_reverse_sde(drift_fn, g_fn, score_fn, times, z, rng):
    """Euler-Maruyama for dz = [f - g^2 s] dt + g dw, run from times[0]
    down to times[-1] (times strictly decreasing)."""
    for k in range(len(times) - 1):
        t = times[k]
        dt = times[k] - times[k + 1]
        g = g_fn(t)
        z = (z - (drift_fn(z, t) - g * g * score_fn(z, t)) * dt
             + g * np.sqrt(dt) * rng.standard_normal(z.shape))
        _check_state(z, k + 1)
    return z


def integrate_pf_ode(drift_fn, g_fn, score_fn, times, z):
    """Heun's method for dz/dt = f - (g^2/2) s, run backward in time."""
    def slope(state, t):
        g = g_fn(t)
        return drift_fn(state, t) - 0.5 * g * g * score_fn(state, t)

    for k in range(len(times) - 1):
        t0, t1 = times[k], times[k + 1]
        dt = t0 - t1
        d0 = slope(z, t0)
        z_pred = z - d0 * dt
        d1 = slope(z_pred, t1)
        z = z - 0.5 * dt * (d0 + d1)
        _check_state(z, k + 1)
    return z


def _spec_fns(spec, score):
    score_fn = as_score_fn(score)
    return (lambda z, t: drift(spec, z, t),
            lambda t: diffusion_coeff(spec, t),
            score_fn)


def _dim_of(spec, score, dim):
    if dim is not None:
        return dim
    if spec.kind == LANGEVIN:
        return spec.reference.dim
    if hasattr(score, "dim"):
        return score.dim
    raise ValueError("cannot infer dimension; pass a ScoreNet or dim=")


def reverse_sde_sample(score, spec, cfg, n, rng=None, dim=None):
    """Draw n latents by integrating the reverse-time SDE."""
    rng = check_rng(rng)
    times = np.linspace(spec.horizon, cfg.t_end, cfg.steps + 1)
    z = _initial_draw(spec, n, _dim_of(spec, score, dim), rng)
    drift_fn, g_fn, score_fn = _spec_fns(spec, score)
    return integrate_reverse_sde(drift_fn, g_fn, score_fn, times, z, rng)


def pf_ode_sample(score, spec, cfg, n, rng=None, dim=None):
    """Draw n latents by integrating the probability-flow ODE; the rng
    is consumed only by the initial draw."""
    rng = check_rng(rng)
    times = np.linspace(spec.horizon, cfg.t_end, cfg.steps + 1)
    z = _initial_draw(spec, n, _dim_of(spec, score, dim), rng)
    drift_fn, g_fn, score_fn = _spec_fns(spec, score)
    return integrate_pf_ode(drift_fn, g_fn, score_fn, times, z)


def sample_latents(score, spec, cfg, n, rng=None, dim=None):
    if cfg.method == "reverse_sde":
        return reverse_sde_sample(score, spec, cfg, n, rng, dim=dim)
    return pf_ode_sample(score, spec, cfg, n, rng, dim=dim)


def decode_samples(vae, z, threshold=None):
    """Map latents through the decoder to data-space samples."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] != vae.latent_dim:
        raise ValueError(f"latent dim {z.shape[1]} != {vae.latent_dim}")
    return decode_np(vae, z, threshold=threshold)
