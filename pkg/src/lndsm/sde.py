"""Forward noising diffusions and their Euler-Maruyama discretisation.

Two process families are supported: a variance-preserving linear SDE
dz = -(1/2) beta(t) z dt + sqrt(beta(t)) dw with beta linear in t, and a
Langevin process dz = grad log pi(z) dt + g dw whose invariant law is a
Gaussian-mixture reference pi.

The simulator keeps, for every step, the one-step conditional mean, the
noise scale and the standard-normal draw, because the training estimator
consumes exactly those quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericalError
from .gmm import DiagonalGmm
from .validation import check_matrix, check_rng

LANGEVIN = "langevin"
VP = "vp"


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing times t[0]=0 .. t[n_f]=horizon."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if t.ndim != 1 or t.shape[0] < 2:
            raise ValueError("grid needs at least two time points")
        if t[0] != 0.0:
            raise ValueError("grid must start at t=0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")
        object.__setattr__(self, "t", t)

    @classmethod
    def uniform(cls, horizon, n_steps):
        if n_steps < 1 or horizon <= 0:
            raise ValueError("need n_steps >= 1 and horizon > 0")
        return cls(np.linspace(0.0, horizon, n_steps + 1))

    @property
    def n_steps(self):
        return self.t.shape[0] - 1

    @property
    def horizon(self):
        return float(self.t[-1])

    @property
    def dt(self):
        return np.diff(self.t)


@dataclass(frozen=True)
class DiffusionSpec:
    """Drift/diffusion definition for a forward noising process."""

    kind: str
    reference: DiagonalGmm | None = None
    beta0: float = 0.1
    beta1: float = 20.0
    g_const: float = float(np.sqrt(2.0))
    horizon: float = 1.0

    def __post_init__(self):
        if self.kind not in (LANGEVIN, VP):
            raise ValueError(f"unknown diffusion kind {self.kind!r}")
        if self.kind == VP and not (self.beta1 >= self.beta0 > 0):
            raise ValueError("VP requires beta1 >= beta0 > 0")
        if self.kind == LANGEVIN and self.reference is None:
            raise ValueError("Langevin diffusion needs a reference mixture")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def dim(self):
        return self.reference.dim if self.reference is not None else None

    def beta(self, t):
        """Linear noise schedule on [0, horizon]."""
        return self.beta0 + (self.beta1 - self.beta0) * np.asarray(t) / self.horizon


def drift(spec, z, t):
    """Forward drift f(z, t); t may be a scalar or one value per row."""
    z = check_matrix(z, "z")
    if spec.kind == LANGEVIN:
        if z.shape[1] != spec.reference.dim:
            raise ValueError("state dimension does not match the reference")
        return spec.reference.log_density_grad(z)
    beta = np.asarray(spec.beta(t), dtype=np.float64)
    scale = -0.5 * (beta[:, None] if beta.ndim == 1 else beta)
    return scale * z


def drift_graph(tape, spec, z, t):
    """Taped version of ``drift`` for a (batch, d) tensor ``z``."""
    if spec.kind == LANGEVIN:
        return gmm_score_op(tape, spec.reference, z)
    beta = np.asarray(spec.beta(t), dtype=np.float64)
    scale = -0.5 * (beta[:, None] if beta.ndim == 1 else beta)
    return ad.mul(z, scale)


def diffusion_coeff(spec, t):
    """Diffusion coefficient g(t); validates 0 <= t <= horizon."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > spec.horizon + 1e-12):
        raise ValueError("t outside [0, horizon]")
    if spec.kind == LANGEVIN:
        return np.broadcast_to(np.float64(spec.g_const), t_arr.shape).copy() \
            if t_arr.ndim else float(spec.g_const)
    g = np.sqrt(spec.beta(t_arr))
    return g if t_arr.ndim else float(g)


def gmm_score_op(tape, gmm, z):
    """Mixture log-density gradient as a differentiable primitive.

    The backward pass multiplies by the analytic Hessian of the log
    density, so gradients flow through the Langevin drift.
    """
    if not z.requires_grad:
        return tape.const(gmm.log_density_grad(z.data))
    grad, hess = gmm.log_density_grad_hess(z.data)
    out = tape.tensor(grad, requires_grad=True)
    def backward(g):
        ad._accum(z, np.einsum("nde,ne->nd", hess, g))
    tape._record(out, backward)
    return out


@dataclass
class EmTrajectory:
    """Batch of discretised forward paths.

    states[n] is z_n for n = 0..n_f; means[n-1] and noise[n-1] are the
    conditional mean and standard-normal draw that produced z_n, with
    scalar noise_scales[n-1] = g(t_{n-1}) sqrt(dt_{n-1}).
    """

    states: np.ndarray       # (n_f+1, batch, d)
    means: np.ndarray        # (n_f, batch, d)
    noise: np.ndarray        # (n_f, batch, d)
    noise_scales: np.ndarray  # (n_f,)
    grid: TimeGrid

    @property
    def n_steps(self):
        return self.grid.n_steps

    @property
    def batch(self):
        return self.states.shape[1]

    def reconstruction_residual(self):
        """max |z_n - (mean_{n-1} + scale_{n-1} * noise_{n-1})| over all steps."""
        rebuilt = self.means + self.noise_scales[:, None, None] * self.noise
        return float(np.max(np.abs(self.states[1:] - rebuilt)))

    def terminal(self):
        return self.states[-1]


def draw_step_noise(grid, batch, dim, rng):
    """All standard-normal draws for one batch: shape (n_f, batch, d).

    Draws are consumed step-major, then row-major over (trajectory,
    component), which fixes the documented stream order for replay.
    """
    return check_rng(rng).standard_normal((grid.n_steps, batch, dim))


def noise_scales(spec, grid):
    scales = np.asarray([
        diffusion_coeff(spec, grid.t[n]) * np.sqrt(grid.dt[n])
        for n in range(grid.n_steps)
    ])
    if np.any(scales <= 0):
        raise NumericalError("non-positive noise scale; malformed grid")
    return scales


def em_simulate(spec, z0, grid, rng=None, noise=None):
    """Euler-Maruyama forward pass retaining per-step transition data."""
    z0 = check_matrix(z0, "z0")
    batch, dim = z0.shape
    if spec.kind == LANGEVIN and dim != spec.reference.dim:
        raise ValueError("state dimension does not match the reference")
    if noise is None:
        noise = draw_step_noise(grid, batch, dim, rng)
    scales = noise_scales(spec, grid)

    states = np.empty((grid.n_steps + 1, batch, dim))
    means = np.empty((grid.n_steps, batch, dim))
    states[0] = z0
    for n in range(grid.n_steps):
        means[n] = states[n] + drift(spec, states[n], grid.t[n]) * grid.dt[n]
        states[n + 1] = means[n] + scales[n] * noise[n]
        if not np.all(np.isfinite(states[n + 1])):
            raise NumericalError(f"non-finite state at step {n + 1}")
    return EmTrajectory(states=states, means=means, noise=noise,
                        noise_scales=scales, grid=grid)


@dataclass
class GraphTrajectory:
    """Taped twin of ``EmTrajectory``: states/means are graph tensors."""

    states: list            # n_f+1 tensors, each (batch, d)
    means: list             # n_f tensors
    noise: np.ndarray       # (n_f, batch, d), constants
    noise_scales: np.ndarray
    grid: TimeGrid

    @property
    def batch(self):
        return self.states[0].shape[0]


def em_simulate_graph(tape, spec, z0, grid, noise):
    """Differentiable forward pass from a taped initial batch ``z0``."""
    scales = noise_scales(spec, grid)
    states = [z0]
    means = []
    for n in range(grid.n_steps):
        f = drift_graph(tape, spec, states[n], grid.t[n])
        mean_n = ad.add(states[n], ad.mul(f, grid.dt[n]))
        step = ad.add(mean_n, scales[n] * noise[n])
        if not np.all(np.isfinite(step.data)):
            raise NumericalError(f"non-finite state at step {n + 1}")
        means.append(mean_n)
        states.append(step)
    return GraphTrajectory(states=states, means=means, noise=noise,
                           noise_scales=scales, grid=grid)


def conditional_score(traj, n):
    """One-step conditional score at step n: -noise_{n-1} / scale_{n-1}."""
    if not 1 <= n <= traj.n_steps:
        raise IndexError(f"step index {n} outside 1..{traj.n_steps}")
    return -traj.noise[n - 1] / traj.noise_scales[n - 1]
