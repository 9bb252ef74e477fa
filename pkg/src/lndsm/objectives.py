"""Training objectives for the latent score models, plus their oracles.

Three trainable objectives live here:

* ``dsm_vp_loss`` - denoising score matching against the closed-form
  variance-preserving kernel (the linear-diffusion baseline).
* ``ndsm_loss`` - the ambient-space objective for nonlinear drifts built
  from one-step conditional scores of the discretised chain.
* ``lndsm_ce_estimate`` - the cross-entropy estimator used for the
  latent nonlinear model: a squared-norm term plus two differences in
  which the exploding zero-mean parts have been subtracted out.

The numpy-only ``estimator_values`` path reproduces the same per-sample
quantities without a tape, for large Monte-Carlo probes; one test pins
the two paths to each other bit-for-bit on shared draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericalError
from .nets import (ParamBinding, ScoreNet, encoder_neg_entropy, score_apply,
                   score_apply_np, vae_decode_nll, vae_encode, LOG_2PI)
from .sde import (VP, DiffusionSpec, TimeGrid, diffusion_coeff, draw_step_noise,
                  drift, drift_graph, em_simulate_graph, noise_scales)
from .validation import check_rng

SIGMA_FLOOR = 1e-12

MODE_LSGM = "lsgm"
MODE_LNDSM = "lndsm"
MODE_NDSM = "ndsm"
MODE_PRETRAIN = "pretrain"


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar components of one loss evaluation.

    ``total = recon + neg_entropy + ce`` always; in lndsm mode
    ``ce = 0.5 * sq_norm + score_cv - drift_cv``.
    """

    total: float
    recon: float
    neg_entropy: float
    ce: float
    sq_norm: float = 0.0
    score_cv: float = 0.0
    drift_cv: float = 0.0


# -- closed-form kernel of the variance-preserving SDE -------------------


def beta_integral(spec, t):
    """Integral of the linear noise schedule from 0 to t."""
    t = np.asarray(t, dtype=np.float64)
    return spec.beta0 * t + (spec.beta1 - spec.beta0) * t * t / (2.0 * spec.horizon)


def vp_kernel(spec, t):
    """Conditional mean factor m(t) and variance v(t) = 1 - m(t)^2."""
    if spec.kind != VP:
        raise ValueError("kernel is defined for the VP diffusion only")
    m = np.exp(-0.5 * beta_integral(spec, t))
    return m, 1.0 - m * m


def vp_chain_moments(spec, grid, mean0, var0):
    """Exact per-dimension mean/variance recursion of the discretised
    linear chain started from a Gaussian; arrays of length n_f + 1."""
    means = np.empty(grid.n_steps + 1)
    varis = np.empty(grid.n_steps + 1)
    means[0], varis[0] = mean0, var0
    for n in range(grid.n_steps):
        a = 1.0 - 0.5 * spec.beta(grid.t[n]) * grid.dt[n]
        means[n + 1] = a * means[n]
        varis[n + 1] = a * a * varis[n] + spec.beta(grid.t[n]) * grid.dt[n]
    return means, varis


# -- taped losses --------------------------------------------------------


def dsm_vp_loss(net, z0, spec, rng, binding, t_min=0.01, draws=None):
    """Denoising score matching under the closed-form VP kernel.

    Per sample: t ~ U(0, T] floored at ``t_min``, z_t = m z0 + sqrt(v) e,
    value = (g^2/2) |s(z_t, t) + e / sqrt(v)|^2. Returns the batch-mean
    loss tensor and the unhalved weighted squared norm for logging.
    """
    if spec.kind != VP:
        raise ValueError("dsm_vp_loss requires a VP spec")
    batch = z0.shape[0]
    if draws is None:
        rng = check_rng(rng)
        t = np.maximum(rng.uniform(0.0, spec.horizon, batch), t_min)
        eps = rng.standard_normal(z0.shape)
    else:
        t, eps = draws
    m, v = vp_kernel(spec, t)
    z_t = ad.add(ad.mul(z0, m[:, None]), np.sqrt(v)[:, None] * eps)
    resid = ad.add(score_apply(net, z_t, t, binding), eps / np.sqrt(v)[:, None])
    weighted = ad.mul(ad.dot_rows(resid, resid), spec.beta(t))
    loss = ad.mul(ad.tmean(weighted), 0.5)
    return loss, float(weighted.data.mean())


def _select_steps(step_idx):
    """Row permutation grouping equal step indices, plus group slices."""
    uniq = np.unique(step_idx)
    groups = [np.flatnonzero(step_idx == n) for n in uniq]
    return uniq, groups, np.concatenate(groups)


def lndsm_ce_estimate(net, gtraj, spec, rng, binding, step_idx=None):
    """Discretised cross-entropy estimator over a taped trajectory.

    Each sample draws its own step index N uniformly from {1..n_f} and
    contributes

        (g^2/2)|s(z_N, t_N)|^2
        + g^2 (U/sigma) . [s(z_N, t_N) - s(mu_{N-1}, t_N)]
        -     (U/sigma) . [f(z_N, t_N) - f(mu_{N-1}, t_N)]

    The terminal-entropy constant is intentionally not included. The
    drift difference carries no score-network gradient but does carry
    encoder gradient through the simulated states. Returns the batch
    mean and the (sq_norm, score_cv, drift_cv) component means.
    """
    grid = gtraj.grid
    batch = gtraj.batch
    if step_idx is None:
        step_idx = check_rng(rng).integers(1, grid.n_steps + 1, size=batch)
    uniq, groups, perm = _select_steps(step_idx)

    z_sel = ad.concat([ad.take_rows(gtraj.states[n], rows)
                       for n, rows in zip(uniq, groups)], axis=0)
    mu_sel = ad.concat([ad.take_rows(gtraj.means[n - 1], rows)
                        for n, rows in zip(uniq, groups)], axis=0)
    u_sel = gtraj.noise[step_idx[perm] - 1, perm]
    sig_sel = gtraj.noise_scales[step_idx[perm] - 1]
    if np.any(sig_sel < SIGMA_FLOOR):
        raise NumericalError("noise scale below floor; malformed grid")
    t_sel = grid.t[step_idx[perm]]
    g2 = np.asarray(diffusion_coeff(spec, t_sel)) ** 2
    w = u_sel / sig_sel[:, None]

    s_z = score_apply(net, z_sel, t_sel, binding)
    s_mu = score_apply(net, mu_sel, t_sel, binding)
    f_z = drift_graph(binding.tape, spec, z_sel, t_sel)
    f_mu = drift_graph(binding.tape, spec, mu_sel, t_sel)

    sq = ad.mul(ad.dot_rows(s_z, s_z), g2)
    score_cv = ad.mul(ad.dot_rows(ad.sub(s_z, s_mu), w), g2)
    drift_cv = ad.dot_rows(ad.sub(f_z, f_mu), w)
    ce = ad.tmean(ad.sub(ad.add(ad.mul(sq, 0.5), score_cv), drift_cv))
    terms = (float(sq.data.mean()), float(score_cv.data.mean()),
             float(drift_cv.data.mean()))
    return ce, terms


def ndsm_loss(net, traj, rng, binding, step_idx=None):
    """Ambient-space objective over a constant (non-taped) trajectory.

    Per sample: 0.5 |s(z_N, t_N)|^2 + (U/sigma) . [s(z_N) - s(mu_{N-1})].
    Returns the batch mean and (sq_norm, score_cv, 0) component means.
    """
    batch = traj.batch
    if step_idx is None:
        step_idx = check_rng(rng).integers(1, traj.n_steps + 1, size=batch)
    rows = np.arange(batch)
    z_sel = traj.states[step_idx, rows]
    mu_sel = traj.means[step_idx - 1, rows]
    u_sel = traj.noise[step_idx - 1, rows]
    sig_sel = traj.noise_scales[step_idx - 1]
    if np.any(sig_sel < SIGMA_FLOOR):
        raise NumericalError("noise scale below floor; malformed grid")
    t_sel = traj.grid.t[step_idx]
    w = u_sel / sig_sel[:, None]

    tape = binding.tape
    s_z = score_apply(net, tape.const(z_sel), t_sel, binding)
    s_mu = score_apply(net, tape.const(mu_sel), t_sel, binding)
    sq = ad.dot_rows(s_z, s_z)
    corr = ad.dot_rows(ad.sub(s_z, s_mu), w)
    loss = ad.tmean(ad.add(ad.mul(sq, 0.5), corr))
    return loss, (float(sq.data.mean()), float(corr.data.mean()), 0.0)


def pretrain_loss(vae, x, rng, binding):
    """Plain VAE loss: reconstruction + E_q[log q] + CE to N(0, I)."""
    z0, mean, log_std = vae_encode(vae, x, rng, binding)
    recon = vae_decode_nll(vae, z0, x, binding)
    neg_ent = encoder_neg_entropy(log_std)
    sq_mean = ad.tsum(ad.square(mean), axis=1)
    var_sum = ad.tsum(ad.exp(ad.mul(log_std, 2.0)), axis=1)
    ce = ad.add(ad.mul(ad.tmean(ad.add(sq_mean, var_sum)), 0.5),
                0.5 * vae.latent_dim * LOG_2PI)
    total = ad.add(ad.add(recon, neg_ent), ce)
    breakdown = LossBreakdown(total=float(total.data), recon=float(recon.data),
                              neg_entropy=float(neg_ent.data), ce=float(ce.data))
    return total, breakdown


def vae_total_loss(vae, net, x, spec, grid, mode, rng, binding, t_min=0.01):
    """Joint loss: reconstruction + negative encoder entropy + CE term.

    The CE term is the kernel-based matching loss in lsgm mode, or the
    trajectory estimator (simulated from the freshly encoded z0) in
    lndsm mode. Draw order per batch: encoder noise, then the mode's own
    draws (lsgm: times and kernel noise; lndsm: path noise then step
    indices).
    """
    rng = check_rng(rng)
    z0, mean, log_std = vae_encode(vae, x, rng, binding)
    recon = vae_decode_nll(vae, z0, x, binding)
    neg_ent = encoder_neg_entropy(log_std)

    if mode == MODE_LSGM:
        ce, sq_norm = dsm_vp_loss(net, z0, spec, rng, binding, t_min=t_min)
        terms = (sq_norm, 0.0, 0.0)
    elif mode == MODE_LNDSM:
        noise = draw_step_noise(grid, x.shape[0], vae.latent_dim, rng)
        gtraj = em_simulate_graph(binding.tape, spec, z0, grid, noise)
        ce, terms = lndsm_ce_estimate(net, gtraj, spec, rng, binding)
    else:
        raise ValueError(f"unsupported joint mode {mode!r}")

    total = ad.add(ad.add(recon, neg_ent), ce)
    breakdown = LossBreakdown(total=float(total.data), recon=float(recon.data),
                              neg_entropy=float(neg_ent.data),
                              ce=float(ce.data), sq_norm=terms[0],
                              score_cv=terms[1], drift_cv=terms[2])
    return total, breakdown


# -- numpy Monte-Carlo path ----------------------------------------------


@dataclass
class EstimatorComponents:
    """Per-sample pieces of the estimator, with the g^2 weight separate."""

    t: np.ndarray         # times t_N
    g2: np.ndarray        # g^2(t_N)
    sq: np.ndarray        # |s(z_N)|^2
    dot_sz: np.ndarray    # (U/sigma) . s(z_N)
    dot_smu: np.ndarray   # (U/sigma) . s(mu_{N-1})
    dot_fz: np.ndarray    # (U/sigma) . f(z_N)
    dot_fmu: np.ndarray   # (U/sigma) . f(mu_{N-1})
    step_idx: np.ndarray


def as_score_fn(net_or_fn):
    if isinstance(net_or_fn, ScoreNet):
        return lambda z, t: score_apply_np(net_or_fn, z, t)
    return net_or_fn


def estimator_values(score, spec, grid, z0, rng=None, step_idx=None,
                     noise=None):
    """Stream one forward pass, keeping each sample only at its own step.

    Memory stays O(batch * d) regardless of n_f, so this path scales to
    the 1e5-trajectory probes. Draw order: step indices first (when not
    supplied), then path noise step by step.
    """
    score = as_score_fn(score)
    rng = check_rng(rng)
    z0 = np.asarray(z0, dtype=np.float64)
    m, d = z0.shape
    scales = noise_scales(spec, grid)
    if step_idx is None:
        step_idx = rng.integers(1, grid.n_steps + 1, size=m)
    if np.any(scales[step_idx - 1] < SIGMA_FLOOR):
        raise NumericalError("noise scale below floor; malformed grid")

    z_sel = np.empty((m, d))
    mu_sel = np.empty((m, d))
    u_sel = np.empty((m, d))
    z = z0.copy()
    for n in range(grid.n_steps):
        mu = z + drift(spec, z, grid.t[n]) * grid.dt[n]
        u = noise[n] if noise is not None else rng.standard_normal((m, d))
        z = mu + scales[n] * u
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite state at step {n + 1}")
        pick = step_idx == n + 1
        if np.any(pick):
            z_sel[pick] = z[pick]
            mu_sel[pick] = mu[pick]
            u_sel[pick] = u[pick]

    t_sel = grid.t[step_idx]
    g2 = np.asarray(diffusion_coeff(spec, t_sel)) ** 2
    w = u_sel / scales[step_idx - 1][:, None]
    s_z = score(z_sel, t_sel)
    s_mu = score(mu_sel, t_sel)
    f_z = drift(spec, z_sel, t_sel)
    f_mu = drift(spec, mu_sel, t_sel)
    return EstimatorComponents(
        t=t_sel, g2=g2, sq=np.sum(s_z * s_z, axis=1),
        dot_sz=np.sum(w * s_z, axis=1), dot_smu=np.sum(w * s_mu, axis=1),
        dot_fz=np.sum(w * f_z, axis=1), dot_fmu=np.sum(w * f_mu, axis=1),
        step_idx=step_idx)


def ce_values(comps, with_cv=True):
    """Per-sample cross-entropy estimator values from the components."""
    vals = (0.5 * comps.g2 * comps.sq + comps.g2 * comps.dot_sz
            - comps.dot_fz)
    if with_cv:
        vals = vals - (comps.g2 * comps.dot_smu - comps.dot_fmu)
    return vals


def ndsm_values(comps):
    return 0.5 * comps.sq + comps.dot_sz - comps.dot_smu


def control_variate_values(comps):
    """The two subtracted zero-mean terms (score part, drift part)."""
    return comps.g2 * comps.dot_smu, comps.dot_fmu


def variance_probe(score, spec, grid, with_cv, m_draws, rng=None,
                   z0_sampler=None):
    """Monte-Carlo mean and variance of the CE estimator.

    ``z0_sampler(n, rng)`` defaults to the reference mixture for the
    Langevin process and the standard normal for the VP process.
    """
    if m_draws < 1000:
        raise ValueError("m_draws must be at least 1e3")
    rng = check_rng(rng)
    if z0_sampler is None:
        if spec.kind == VP:
            dim = score.dim if isinstance(score, ScoreNet) else 2
            z0_sampler = lambda n, r: r.standard_normal((n, dim))
        else:
            z0_sampler = lambda n, r: spec.reference.sample(n, r)
    z0 = z0_sampler(m_draws, rng)
    vals = ce_values(estimator_values(score, spec, grid, z0, rng), with_cv)
    return float(vals.mean()), float(vals.var(ddof=1))


def dsm_ce_values(score, spec, z0, rng=None, t_min=0.01, draws=None):
    """Per-sample kernel-based CE values (numpy twin of dsm_vp_loss)."""
    score = as_score_fn(score)
    z0 = np.asarray(z0, dtype=np.float64)
    if draws is None:
        rng = check_rng(rng)
        t = np.maximum(rng.uniform(0.0, spec.horizon, z0.shape[0]), t_min)
        eps = rng.standard_normal(z0.shape)
    else:
        t, eps = draws
    m, v = vp_kernel(spec, t)
    z_t = z0 * m[:, None] + np.sqrt(v)[:, None] * eps
    resid = score(z_t, t) + eps / np.sqrt(v)[:, None]
    return 0.5 * spec.beta(t) * np.sum(resid * resid, axis=1)


# -- closed-form oracle for the pathwise cross-entropy identity ----------


def gaussian_ce_identity(q0_mean, q0_var, spec, n_quad=64):
    """Both sides of the cross-entropy identity for a 1-D linear case.

    Left side: CE(q0 || N(0,1)) in closed form. Right side: terminal
    entropy plus the time integral of

        E_q[ (g^2/2) |grad log p|^2 + f . grad log q
             - g^2 (grad log q . grad log p) ]

    evaluated by Gauss-Legendre quadrature, with every expectation in
    closed form because all marginals stay Gaussian and the stationary
    law is N(0,1).
    """
    if spec.kind != VP:
        raise ValueError("the identity oracle needs a linear (VP) spec")
    horizon = spec.horizon
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    ts = 0.5 * horizon * (nodes + 1.0)
    ws = 0.5 * horizon * weights

    decay = np.exp(-beta_integral(spec, ts))
    m = q0_mean * np.sqrt(decay)
    v = 1.0 + (q0_var - 1.0) * decay
    beta = spec.beta(ts)

    # E_q[|grad log p|^2] = v + m^2, E_q[f . grad log q] = beta/2,
    # E_q[grad log q . grad log p] = 1.
    integrand = 0.5 * beta * (v + m * m) + 0.5 * beta - beta
    v_end = 1.0 + (q0_var - 1.0) * np.exp(-beta_integral(spec, horizon))
    rhs = 0.5 * np.log(2.0 * np.pi * np.e * v_end) + float(ws @ integrand)
    lhs = 0.5 * LOG_2PI + 0.5 * (q0_var + q0_mean ** 2)
    if not (np.isfinite(lhs) and np.isfinite(rhs)):
        raise NumericalError("cross-entropy identity oracle diverged")
    return lhs, rhs
