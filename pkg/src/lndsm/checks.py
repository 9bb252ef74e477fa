"""Built-in property suite behind the ``check`` subcommand.

Every invariant published by a module has exactly one named check here;
``run_checks`` enforces that coverage and returns a machine-readable
report. The pytest suite calls the same functions, so the CLI and the
tests cannot drift apart.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .datasets import make_gmm2d
from .gmm import DiagonalGmm
from .metrics import (FixedRandomFeatures, frechet_surrogate,
                      mode_fraction_kl, sliced_wasserstein)
from .nets import ParamBinding, init_score_net, init_vae, score_apply_np
from .objectives import (MODE_LNDSM, MODE_LSGM, ce_values,
                         control_variate_values, dsm_vp_loss,
                         estimator_values, gaussian_ce_identity,
                         lndsm_ce_estimate, vae_total_loss, vp_chain_moments,
                         vp_kernel)
from .samplers import SamplerConfig, pf_ode_sample, reverse_sde_sample
from .sde import (LANGEVIN, VP, DiffusionSpec, TimeGrid, conditional_score,
                  draw_step_noise, em_simulate, em_simulate_graph)
from .training import (TrainConfig, RunLog, checkpoint_load, checkpoint_save,
                       init_state, pretrain_vae, train)
from .config import parse_config


@dataclass
class CheckResult:
    module: str
    invariant: str
    passed: bool
    detail: str
    seconds: float


_REGISTRY = []


def register(module, invariant):
    def wrap(fn):
        _REGISTRY.append((module, invariant, fn))
        return fn
    return wrap


# Invariants & Properties coverage table, one entry per published item.
INVARIANTS = {
    "sde_core": ["reconstruction", "vp_moment_match", "langevin_invariance",
                 "grid_refinement"],
    "reference_gmm": ["score_density_consistency", "responsibilities",
                      "fit_monotone_likelihood", "sampling_law"],
    "tensor_autodiff": ["primitive_gradients", "whole_loss_gradient",
                        "tape_determinism"],
    "objectives": ["cv_zero_mean", "estimator_mean_invariance",
                   "marginal_conditional_identity", "breakdown_additivity",
                   "ce_identity_oracle", "linear_drift_alignment"],
    "samplers": ["exact_score_recovery", "sde_ode_agreement"],
    "eval_metrics": ["kl_nonnegative", "sw_pseudometric",
                     "frechet_self_vs_shift"],
    "trainer": ["determinism", "per_group_lr", "checkpoint_roundtrip"],
    "cli_app": ["config_roundtrip", "artifact_manifests", "check_coverage"],
}


# -- shared fixtures ------------------------------------------------------


def _toy_mixture():
    return make_gmm2d(10, seed=1).assignment


def _langevin_setup(n_steps=100, horizon=1.5, net_seed=7):
    gmm = _toy_mixture()
    spec = DiffusionSpec(LANGEVIN, reference=gmm, horizon=horizon)
    grid = TimeGrid.uniform(horizon, n_steps)
    net = init_score_net(2, horizon, np.random.default_rng(net_seed),
                         hidden=32, zero_last=False)
    return spec, grid, net


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def finite_difference_grad(fn, arr, coords, eps=1e-5):
    """Central finite differences of scalar fn at selected flat coords."""
    out = []
    flat = arr.reshape(-1)
    for c in coords:
        keep = flat[c]
        flat[c] = keep + eps
        up = fn()
        flat[c] = keep - eps
        down = fn()
        flat[c] = keep
        out.append((up - down) / (2 * eps))
    return np.array(out)


# -- sde_core -------------------------------------------------------------


@register("sde_core", "reconstruction")
def check_reconstruction():
    spec, grid, _ = _langevin_setup(n_steps=50)
    rng = np.random.default_rng(0)
    traj = em_simulate(spec, rng.standard_normal((64, 2)), grid, rng)
    resid = traj.reconstruction_residual()
    return resid < 1e-12, f"max reconstruction residual {resid:.3e}"


@register("sde_core", "vp_moment_match")
def check_vp_moment_match():
    # Two-part: the simulator matches its own exact discrete law at the
    # training step count, and matches the continuous kernel once the
    # grid is fine enough for the O(dt) bias to sit inside the MC noise.
    spec = DiffusionSpec(VP, beta0=0.1, beta1=20.0, horizon=1.0)
    rng = np.random.default_rng(1)
    m_traj = 10_000
    msgs = []
    ok = True
    for n_steps, oracle in ((100, "chain"), (2000, "kernel")):
        grid = TimeGrid.uniform(1.0, n_steps)
        z0 = np.full((m_traj, 1), 0.7)
        z_end = em_simulate(spec, z0, grid, rng).terminal()[:, 0]
        if oracle == "chain":
            want_mean, want_var = (arr[-1] for arr in
                                   vp_chain_moments(spec, grid, 0.7, 0.0))
        else:
            m, v = vp_kernel(spec, grid.horizon)
            want_mean, want_var = m * 0.7, v
        mean_se = z_end.std(ddof=1) / np.sqrt(m_traj)
        var_se = z_end.var(ddof=1) * np.sqrt(2.0 / (m_traj - 1))
        mean_err = abs(z_end.mean() - want_mean)
        var_err = abs(z_end.var(ddof=1) - want_var)
        ok &= mean_err <= 3 * mean_se and var_err <= 3 * var_se
        msgs.append(f"{oracle}@{n_steps}: mean err {mean_err:.2e} "
                    f"(SE {mean_se:.2e}), var err {var_err:.2e} "
                    f"(SE {var_se:.2e})")
    return ok, "; ".join(msgs)


@register("sde_core", "langevin_invariance")
def check_langevin_invariance():
    spec, grid, _ = _langevin_setup()
    rng = np.random.default_rng(2)
    m_traj = 10_000
    z0 = spec.reference.sample(m_traj, rng)
    z_end = em_simulate(spec, z0, grid, rng).terminal()
    mean_ref, var_ref = spec.reference.mixture_moments()
    ok = True
    msgs = []
    for j in range(2):
        se_mean = z_end[:, j].std(ddof=1) / np.sqrt(m_traj)
        err_mean = abs(z_end[:, j].mean() - mean_ref[j])
        se_var = z_end[:, j].var(ddof=1) * np.sqrt(2.0 / (m_traj - 1))
        err_var = abs(z_end[:, j].var(ddof=1) - var_ref[j])
        # O(dt) weak bias of the EM scheme is allowed for on top of SE.
        ok &= err_mean <= 3 * se_mean + 0.1 and err_var <= 3 * se_var + 0.6
        msgs.append(f"dim{j}: mean err {err_mean:.3f}, var err {err_var:.3f}")
    return ok, "; ".join(msgs)


@register("sde_core", "grid_refinement")
def check_grid_refinement():
    # Weak order of the EM scheme on the constant-rate linear case,
    # using the exact discrete-chain moments so no MC noise enters.
    spec = DiffusionSpec(VP, beta0=2.0, beta1=2.0, horizon=1.0)
    m_kern, v_kern = vp_kernel(spec, 1.0)
    mean0, var0 = 1.0, 0.25
    want_mean = m_kern * mean0
    want_var = m_kern * m_kern * var0 + v_kern
    dts, errs = [], []
    for n_steps in (10, 20, 40, 80):
        grid = TimeGrid.uniform(1.0, n_steps)
        means, varis = vp_chain_moments(spec, grid, mean0, var0)
        dts.append(1.0 / n_steps)
        errs.append(abs(means[-1] - want_mean) + abs(varis[-1] - want_var))
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    return slope >= 0.8, f"log-log slope {slope:.3f} over dt {dts}"


# -- reference_gmm --------------------------------------------------------


@register("reference_gmm", "score_density_consistency")
def check_gmm_score_consistency():
    rng = np.random.default_rng(3)
    gmm = DiagonalGmm.from_params(
        weights=[0.2, 0.5, 0.3],
        means=rng.normal(size=(3, 2)) * 2.0,
        variances=rng.uniform(0.3, 1.5, size=(3, 2)))
    probes = rng.normal(size=(100, 2)) * 2.0
    grad = gmm.log_density_grad(probes)
    eps = 1e-6
    worst = 0.0
    for j in range(2):
        shift = np.zeros(2)
        shift[j] = eps
        fd = (gmm.score_samples(probes + shift)
              - gmm.score_samples(probes - shift)) / (2 * eps)
        denom = np.maximum(np.abs(grad[:, j]), 1e-6)
        worst = max(worst, float(np.max(np.abs(fd - grad[:, j]) / denom)))
    return worst < 1e-6, f"max relative gradient error {worst:.2e}"


@register("reference_gmm", "responsibilities")
def check_gmm_responsibilities():
    rng = np.random.default_rng(4)
    gmm = DiagonalGmm.from_params([0.6, 0.4], [[-2.0, 0.0], [2.0, 0.0]],
                                  [[1.0, 1.0], [1.0, 1.0]])
    r = gmm.responsibilities(rng.normal(size=(200, 2)) * 3.0)
    sums = np.abs(r.sum(axis=1) - 1.0)
    ok = np.max(sums) < 1e-12 and np.all(r >= 0) and np.all(r <= 1)
    return ok, f"max |sum-1| = {np.max(sums):.2e}"


@register("reference_gmm", "fit_monotone_likelihood")
def check_gmm_fit_monotone():
    rng = np.random.default_rng(5)
    X = np.concatenate([rng.normal(-3, 1, size=(300, 2)),
                        rng.normal(3, 1, size=(300, 2))])
    gmm = DiagonalGmm(n_components=2, seed=0).fit(X)
    diffs = np.diff(gmm.log_likelihoods_)
    ok = bool(np.all(diffs >= -1e-9))
    return ok, f"min per-iteration improvement {diffs.min():.2e}"


@register("reference_gmm", "sampling_law")
def check_gmm_sampling_law():
    gmm = _toy_mixture()
    rng = np.random.default_rng(6)
    n = 100_000
    X = gmm.sample(n, rng)
    mean_ref, var_ref = gmm.mixture_moments()
    ok = True
    msgs = []
    for j in range(2):
        se_mean = X[:, j].std(ddof=1) / np.sqrt(n)
        se_var = X[:, j].var(ddof=1) * np.sqrt(2.0 / (n - 1)) * 2.0
        ok &= abs(X[:, j].mean() - mean_ref[j]) <= 4 * se_mean
        ok &= abs(X[:, j].var(ddof=1) - var_ref[j]) <= 4 * se_var
        msgs.append(f"dim{j} mean dev {abs(X[:, j].mean() - mean_ref[j]):.4f}")
    return ok, "; ".join(msgs)


# -- tensor_autodiff ------------------------------------------------------


def primitive_gradient_error(make_loss, arr, eps=1e-5):
    """Max relative error of taped grads vs central differences, over
    every coordinate of ``arr``."""
    tape = Tape()
    leaf = tape.param(arr)
    tape.backward(make_loss(leaf))
    grad = leaf.grad.reshape(-1)
    flat = arr.reshape(-1)
    worst = 0.0
    for c in range(arr.size):
        keep = flat[c]
        flat[c] = keep + eps
        up = float(make_loss(Tape().param(arr)).data)
        flat[c] = keep - eps
        down = float(make_loss(Tape().param(arr)).data)
        flat[c] = keep
        worst = max(worst, _rel_err(grad[c], (up - down) / (2 * eps)))
    return worst


@register("tensor_autodiff", "primitive_gradients")
def check_primitive_gradients():
    rng = np.random.default_rng(7)
    other = rng.normal(size=(3, 4))
    wmat = rng.normal(size=(4, 2))
    cases = [
        lambda x: ad.tsum(ad.mul(x, other)),
        lambda x: ad.tsum(ad.square(ad.matmul(x, wmat))),
        lambda x: ad.tsum(ad.exp(ad.mul(x, 0.3))),
        lambda x: ad.tsum(ad.log(x)),
        lambda x: ad.tsum(ad.silu(x)),
        lambda x: ad.tsum(ad.sigmoid(x)),
        lambda x: ad.tsum(ad.softplus(x)),
        lambda x: ad.tmean(ad.square(x)),
        lambda x: ad.tsum(ad.mul(ad.concat([x, x], axis=1), 0.5)),
        lambda x: ad.tsum(ad.square(ad.take_rows(x, np.array([0, 2, 2])))),
        lambda x: ad.tsum(ad.square(ad.slice_cols(x, 1, 3))),
        lambda x: ad.tsum(ad.square(ad.add(x, -0.5 * other))),
    ]
    worst = max(primitive_gradient_error(case, rng.normal(size=(3, 4)) + 1.5)
                for case in cases)
    return worst < 1e-6, f"max relative primitive-gradient error {worst:.2e}"


def whole_loss_gradient_error(mode, seed=11, batch=16, coords_per_group=10):
    """Max relative error of the full joint-loss gradient vs central
    finite differences over random coordinates of each parameter group."""
    rng = np.random.default_rng(seed)
    gmm = _toy_mixture()
    vae = init_vae(2, 2, np.random.default_rng(seed + 1), hidden=16)
    horizon = 1.5 if mode == MODE_LNDSM else 1.0
    net = init_score_net(2, horizon, np.random.default_rng(seed + 2),
                         hidden=16, zero_last=False)
    if mode == MODE_LNDSM:
        spec = DiffusionSpec(LANGEVIN, reference=gmm, horizon=horizon)
        grid = TimeGrid.uniform(horizon, 20)
    else:
        spec = DiffusionSpec(VP, horizon=horizon)
        grid = TimeGrid.uniform(horizon, 20)
    x = gmm.sample(batch, rng)

    def loss_value():
        binding = ParamBinding(Tape())
        loss, _ = vae_total_loss(vae, net, x, spec, grid, mode,
                                 np.random.default_rng(seed + 3), binding)
        return float(loss.data)

    binding = ParamBinding(Tape())
    loss, _ = vae_total_loss(vae, net, x, spec, grid, mode,
                             np.random.default_rng(seed + 3), binding)
    binding.tape.backward(loss)

    worst = 0.0
    pick = np.random.default_rng(seed + 4)
    for params, grads in ((vae.params, binding.grads(vae.params)),
                          (net.params, binding.grads(net.params))):
        names = sorted(params)
        for _ in range(coords_per_group):
            name = names[pick.integers(len(names))]
            arr = params[name]
            c = int(pick.integers(arr.size))
            fd = finite_difference_grad(loss_value, arr, [c])[0]
            worst = max(worst, _rel_err(grads[name].reshape(-1)[c], fd))
    return worst


@register("tensor_autodiff", "whole_loss_gradient")
def check_whole_loss_gradient():
    worst = max(whole_loss_gradient_error(MODE_LNDSM),
                whole_loss_gradient_error(MODE_LSGM))
    return worst < 1e-4, f"max relative whole-loss gradient error {worst:.2e}"


@register("tensor_autodiff", "tape_determinism")
def check_tape_determinism():
    def run_once():
        spec, grid, net = _langevin_setup(n_steps=10)
        vae = init_vae(2, 2, np.random.default_rng(21), hidden=16)
        binding = ParamBinding(Tape())
        x = np.random.default_rng(22).normal(size=(8, 2))
        loss, _ = vae_total_loss(vae, net, x, spec, grid, MODE_LNDSM,
                                 np.random.default_rng(23), binding)
        binding.tape.backward(loss)
        return float(loss.data), binding.grads(vae.params), binding.grads(net.params)

    l1, gv1, gs1 = run_once()
    l2, gv2, gs2 = run_once()
    same = l1 == l2
    for a, b in ((gv1, gv2), (gs1, gs2)):
        for k in a:
            same &= bool(np.array_equal(a[k], b[k]))
    return same, "two identically seeded passes produced bit-identical grads"


# -- objectives -----------------------------------------------------------


def cv_mean_checks(dts=(0.1, 0.03, 0.015), m_draws=40_000, seed=30):
    """MC means of both subtracted terms at each step size; returns
    (all_within_4se, details, per-dt (mean, se) pairs)."""
    out = []
    details = []
    ok = True
    for i, dt in enumerate(dts):
        spec, grid, net = _langevin_setup(n_steps=int(round(1.5 / dt)))
        rng = np.random.default_rng(seed + i)
        z0 = rng.standard_normal((m_draws, 2))
        comps = estimator_values(net, spec, grid, z0, rng)
        for label, vals in zip(("score", "drift"),
                               control_variate_values(comps)):
            mean = vals.mean()
            se = vals.std(ddof=1) / np.sqrt(m_draws)
            ok &= abs(mean) <= 4 * se
            details.append(f"dt={dt} {label}: mean {mean:.3e} (SE {se:.3e})")
            out.append((mean, se))
    return ok, "; ".join(details), out


@register("objectives", "cv_zero_mean")
def check_cv_zero_mean():
    ok, details, _ = cv_mean_checks()
    return ok, details


@register("objectives", "estimator_mean_invariance")
def check_estimator_mean_invariance():
    spec, grid, net = _langevin_setup()
    rng = np.random.default_rng(33)
    m_draws = 60_000
    z0 = rng.standard_normal((m_draws, 2))
    comps = estimator_values(net, spec, grid, z0, rng)
    with_cv = ce_values(comps, with_cv=True)
    without = ce_values(comps, with_cv=False)
    gap = with_cv.mean() - without.mean()
    se = np.sqrt(with_cv.var(ddof=1) + without.var(ddof=1)) / np.sqrt(m_draws)
    # Shared draws make the difference itself the cleanest statistic.
    diff = with_cv - without
    se_diff = diff.std(ddof=1) / np.sqrt(m_draws)
    ok = abs(diff.mean()) <= 4 * se_diff and abs(gap) <= 4 * se
    return ok, f"mean gap {gap:.3e} (joint SE {se:.3e})"


@register("objectives", "marginal_conditional_identity")
def check_marginal_conditional_identity():
    # 1-D linear chain from a Gaussian start: for affine h(z) = a z + c,
    # E[h(z_N) . grad log q(z_N)] = -a in closed form.
    spec = DiffusionSpec(VP, beta0=0.5, beta1=4.0, horizon=1.0)
    grid = TimeGrid.uniform(1.0, 50)
    rng = np.random.default_rng(34)
    m_draws = 200_000
    a_coef, c_coef = 0.8, -0.4
    z0 = 0.3 + 0.7 * rng.standard_normal((m_draws, 1))
    traj_vals = estimator_values(lambda z, t: a_coef * z + c_coef,
                                 spec, grid, z0, rng)
    mc = -(traj_vals.dot_sz)  # h(z_N) . (-U/sigma) summed over the 1 dim
    se = mc.std(ddof=1) / np.sqrt(m_draws)
    ok = abs(mc.mean() - (-a_coef)) <= 4 * se
    return ok, f"MC {mc.mean():.4f} vs closed form {-a_coef} (SE {se:.2e})"


@register("objectives", "breakdown_additivity")
def check_breakdown_additivity():
    spec, grid, net = _langevin_setup(n_steps=20)
    vae = init_vae(2, 2, np.random.default_rng(35), hidden=16)
    binding = ParamBinding(Tape())
    x = np.random.default_rng(36).normal(size=(16, 2))
    _, bd = vae_total_loss(vae, net, x, spec, grid, MODE_LNDSM,
                           np.random.default_rng(37), binding)
    gap1 = abs(bd.total - (bd.recon + bd.neg_entropy + bd.ce))
    gap2 = abs(bd.ce - (0.5 * bd.sq_norm + bd.score_cv - bd.drift_cv))
    ok = gap1 < 1e-10 and gap2 < 1e-10
    return ok, f"additivity gaps {gap1:.2e}, {gap2:.2e}"


@register("objectives", "ce_identity_oracle")
def check_ce_identity():
    spec = DiffusionSpec(VP, beta0=2.0, beta1=2.0, horizon=8.0)
    lhs, rhs = gaussian_ce_identity(1.0, 0.25, spec, n_quad=64)
    gap = abs(lhs - rhs)
    return gap < 1e-3, f"|lhs - rhs| = {gap:.3e}"


@register("objectives", "linear_drift_alignment")
def check_linear_drift_alignment():
    # Same batch, same VP process: the trajectory estimator's
    # score-parameter gradient should align with the kernel-based one.
    horizon = 1.0
    spec = DiffusionSpec(VP, horizon=horizon)
    grid = TimeGrid.uniform(horizon, 100)
    net = init_score_net(2, horizon, np.random.default_rng(40), hidden=32,
                         zero_last=False)
    rng = np.random.default_rng(41)
    z0 = rng.standard_normal((4000, 2))

    binding = ParamBinding(Tape())
    z0_t = binding.tape.const(z0)
    noise = draw_step_noise(grid, z0.shape[0], 2, rng)
    gtraj = em_simulate_graph(binding.tape, spec, z0_t, grid, noise)
    ce, _ = lndsm_ce_estimate(net, gtraj, spec, rng, binding)
    binding.tape.backward(ce)
    g_traj = np.concatenate([binding.grads(net.params)[k].reshape(-1)
                             for k in sorted(net.params)])

    binding2 = ParamBinding(Tape())
    loss, _ = dsm_vp_loss(net, binding2.tape.const(z0), spec, rng, binding2)
    binding2.tape.backward(loss)
    g_kern = np.concatenate([binding2.grads(net.params)[k].reshape(-1)
                             for k in sorted(net.params)])

    cos = float(g_traj @ g_kern
                / (np.linalg.norm(g_traj) * np.linalg.norm(g_kern)))
    return cos > 0.9, f"gradient cosine similarity {cos:.4f}"


# -- samplers -------------------------------------------------------------


def _exact_vp_score(spec, mean0, var0):
    def score(z, t):
        m, v = vp_kernel(spec, np.asarray(t))
        mean_t = m * mean0
        var_t = m * m * var0 + v
        if np.ndim(t):
            return -(z - mean_t[:, None]) / var_t[:, None]
        return -(z - mean_t) / var_t
    return score


@register("samplers", "exact_score_recovery")
def check_exact_score_recovery():
    spec = DiffusionSpec(VP, horizon=1.0)
    mean0, var0 = 0.5, 1.0
    score = _exact_vp_score(spec, mean0, var0)
    cfg = SamplerConfig(method="reverse_sde", steps=400, t_end=0.01)
    n = 10_000
    ok = True
    msgs = []
    for name, sampler in (("reverse_sde", reverse_sde_sample),
                          ("pf_ode", pf_ode_sample)):
        z = sampler(score, spec, cfg, n, np.random.default_rng(50), dim=1)
        m_t, v_t = vp_kernel(spec, cfg.t_end)
        want_mean = m_t * mean0
        want_var = m_t * m_t * var0 + v_t
        se_mean = z.std(ddof=1) / np.sqrt(n)
        mean_err = abs(z.mean() - want_mean)
        var_rel = abs(z.var(ddof=1) - want_var) / want_var
        ok &= mean_err <= 4 * se_mean + 0.01 and var_rel < 0.05
        msgs.append(f"{name}: mean err {mean_err:.4f}, var rel {var_rel:.4f}")
    return ok, "; ".join(msgs)


@register("samplers", "sde_ode_agreement")
def check_sde_ode_agreement():
    # The exact stationary score stands in for the fully trained net:
    # only at the true score do the SDE and ODE share their marginals.
    spec, grid, _ = _langevin_setup()
    score = lambda z, t: spec.reference.log_density_grad(z)
    cfg = SamplerConfig(method="reverse_sde", steps=150, t_end=0.0)
    n = 8000
    za = reverse_sde_sample(score, spec, cfg, n, np.random.default_rng(51))
    zb = pf_ode_sample(score, spec, cfg, n, np.random.default_rng(52))
    ok = True
    msgs = []
    for j in range(za.shape[1]):
        se = np.sqrt(za[:, j].var(ddof=1) + zb[:, j].var(ddof=1)) / np.sqrt(n)
        gap_mean = abs(za[:, j].mean() - zb[:, j].mean())
        se_var = (za[:, j].var(ddof=1) + zb[:, j].var(ddof=1)) \
            * np.sqrt(2.0 / (n - 1))
        gap_var = abs(za[:, j].var(ddof=1) - zb[:, j].var(ddof=1))
        ok &= gap_mean <= 4 * se and gap_var <= 4 * se_var
        msgs.append(f"dim{j}: mean gap {gap_mean:.3f}, var gap {gap_var:.3f}")
    return ok, "; ".join(msgs)


# -- eval_metrics ---------------------------------------------------------


@register("eval_metrics", "kl_nonnegative")
def check_kl_nonnegative():
    rng = np.random.default_rng(60)
    ok = mode_fraction_kl([0.2, 0.8], [0.2, 0.8]) == 0.0
    for _ in range(50):
        p = rng.dirichlet(np.ones(4))
        q = rng.dirichlet(np.ones(4))
        kl = mode_fraction_kl(p, q)
        ok &= kl >= 0.0
        ok &= (kl > 0.0) == (not np.allclose(p, q))
    return ok, "KL >= 0 and zero exactly on equal fractions"


@register("eval_metrics", "sw_pseudometric")
def check_sw_pseudometric():
    rng = np.random.default_rng(61)
    a = rng.normal(size=(300, 2))
    b = rng.normal(size=(300, 2)) + 0.5
    c = rng.normal(size=(250, 2)) - 0.3
    same = sliced_wasserstein(a, a, rng=np.random.default_rng(0))
    ab = sliced_wasserstein(a, b, rng=np.random.default_rng(0))
    ba = sliced_wasserstein(b, a, rng=np.random.default_rng(0))
    ac = sliced_wasserstein(a, c, rng=np.random.default_rng(0))
    cb = sliced_wasserstein(c, b, rng=np.random.default_rng(0))
    ok = same == 0.0 and abs(ab - ba) < 1e-12 and ab <= ac + cb + 1e-9
    return ok, f"d(a,a)={same:.1e}, sym gap {abs(ab - ba):.1e}, triangle ok"


@register("eval_metrics", "frechet_self_vs_shift")
def check_frechet_self():
    rng = np.random.default_rng(62)
    feats = FixedRandomFeatures(in_dim=2)
    a = rng.normal(size=(10_000, 2))
    b = rng.normal(size=(10_000, 2))
    shifted = rng.normal(size=(10_000, 2)) + 1.0
    self_d = frechet_surrogate(a, b, feats)
    shift_d = frechet_surrogate(a, shifted, feats)
    ok = self_d < 0.05 * shift_d
    return ok, f"self {self_d:.4f} vs unit shift {shift_d:.4f}"


# -- trainer --------------------------------------------------------------


def _tiny_config(mode=MODE_LNDSM, **over):
    base = dict(mode=mode, epochs=2, batch_size=30, pretrain_epochs=3,
                seed=5, n_steps=10, latent_dim=2, hidden=16,
                gmm_components=3, eval_every=0, eval_samples=200,
                sampler_steps=30, log_timing=False, pretrain_lr=1e-3)
    base.update(over)
    return TrainConfig(**base)


def _tiny_data():
    return make_gmm2d(240, seed=9)


@register("trainer", "determinism")
def check_train_determinism():
    def run():
        log = RunLog()
        elog = RunLog(header="eval")
        train(_tiny_config(), _tiny_data(), train_log=log, eval_log=elog)
        return log.rows, elog.rows

    r1, e1 = run()
    r2, e2 = run()
    ok = r1 == r2 and e1 == e2 and len(r1) > 0
    return ok, f"{len(r1)} identical train rows, {len(e1)} eval rows"


@register("trainer", "per_group_lr")
def check_per_group_lr():
    cfg = _tiny_config(lr_vae=0.0)
    data = _tiny_data()
    state = pretrain_vae(cfg, data)
    before = {k: v.copy() for k, v in state.vae.params.items()}
    train(cfg, data, state=state)
    same = all(np.array_equal(before[k], state.vae.params[k]) for k in before)
    return same, "lr_vae=0 left encoder/decoder bit-identical"


@register("trainer", "checkpoint_roundtrip")
def check_checkpoint_roundtrip():
    cfg = _tiny_config()
    state = pretrain_vae(cfg, _tiny_data())
    with tempfile.TemporaryDirectory() as td:
        p1 = os.path.join(td, "a.lnds")
        p2 = os.path.join(td, "b.lnds")
        checkpoint_save(state, p1)
        checkpoint_save(checkpoint_load(p1), p2)
        ok = open(p1, "rb").read() == open(p2, "rb").read()
    return ok, "save(load(save(state))) is byte-identical"


# -- cli_app --------------------------------------------------------------


@register("cli_app", "config_roundtrip")
def check_config_roundtrip():
    text = "[train]\nmode = lndsm\nepochs = 3\n\n[dataset]\nkind = gmm2d\n"
    cfg = parse_config(text)
    again = parse_config(cfg.text)
    ok = cfg.values == again.values
    return ok, "echoed text re-parses to the same mapping"


@register("cli_app", "artifact_manifests")
def check_artifact_manifests():
    from . import cli
    with tempfile.TemporaryDirectory() as td:
        cfg_path = os.path.join(td, "c.cfg")
        with open(cfg_path, "w") as fh:
            fh.write("[dataset]\nkind = gmm2d\nn_train = 50\nseed = 3\n"
                     f"\n[output]\nroot = {td}\nname = ds\n")
        code = cli.main(["make-data", "--config", cfg_path])
        manifest = os.path.join(td, "ds", "manifest.txt")
        kv = dict(parse_config(open(manifest).read()).values)
        ok = code == 0 and kv.get("seed") == "3" and "build_id" in kv
    return ok, "dataset manifest carries seed and build id"


@register("cli_app", "check_coverage")
def check_coverage_meta():
    covered = {(m, i) for m, i, _ in _REGISTRY}
    wanted = {(m, i) for m, ids in INVARIANTS.items() for i in ids}
    missing = wanted - covered
    return not missing, f"missing checks: {sorted(missing)}" if missing \
        else "every published invariant has a check"


def run_checks(fail_fast=False, select=None):
    """Execute the registry; returns (all_passed, [CheckResult])."""
    results = []
    for module, invariant, fn in _REGISTRY:
        if select and module != select:
            continue
        start = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(module, invariant, bool(passed), detail,
                                   time.perf_counter() - start))
        if fail_fast and not passed:
            break
    covered = {(m, i) for m, i, _ in _REGISTRY}
    wanted = {(m, i) for m, ids in INVARIANTS.items() for i in ids}
    coverage_ok = wanted <= covered
    all_passed = coverage_ok and all(r.passed for r in results)
    return all_passed, results
