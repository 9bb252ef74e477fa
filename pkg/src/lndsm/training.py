"""Joint optimisation of encoder, decoder and score network.

One run is driven by a ``TrainConfig``: VAE pretraining against a
standard-normal prior, an optional mixture fit on the pretrained
latents, then the joint loop for the selected objective. All
randomness flows through named substreams spawned from the run seed
(init / pretrain / reference / joint / eval), so a run is a pure
function of (config, data) at thread count 1.
"""

from __future__ import annotations

import os
import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .errors import DataError, NumericalError
from .gmm import DiagonalGmm
from .metrics import (FixedRandomFeatures, assign_modes, frechet_surrogate,
                      inception_surrogate, mode_fraction_kl,
                      sliced_wasserstein)
from .nets import (GAUSSIAN, ParamBinding, ScoreNet, Vae, encode_sample_np,
                   init_score_net, init_vae, mlp_from_params)
from .objectives import (MODE_LNDSM, MODE_LSGM, MODE_NDSM, MODE_PRETRAIN,
                         LossBreakdown, pretrain_loss, ndsm_loss,
                         vae_total_loss)
from .samplers import SamplerConfig, decode_samples, default_t_end, sample_latents
from .sde import LANGEVIN, VP, DiffusionSpec, TimeGrid, em_simulate

TRAIN_CSV_HEADER = ("epoch,step,mode,total,recon,neg_entropy,ce,"
                    "sq_norm,score_cv,drift_cv,wall_ms")
EVAL_CSV_HEADER = "epoch,mode,mf_kl,sw,frechet,is_surrogate,n_samples,sampler,seed"


@dataclass(frozen=True)
class TrainConfig:
    mode: str = MODE_LNDSM
    epochs: int = 50
    batch_size: int = 60
    lr_vae: float | None = None       # per-mode default, see resolved_lr_vae
    lr_score: float = 3e-4
    pretrain_epochs: int = 200
    pretrain_lr: float = 1e-3
    seed: int = 0
    horizon: float | None = None      # per-mode default, see resolved_horizon
    n_steps: int = 100
    eval_every: int = 0               # epochs between evals; 0 = final only
    latent_dim: int = 2
    hidden: int = 64
    gmm_components: int = 3
    beta0: float = 0.1
    beta1: float = 20.0
    g_const: float = float(np.sqrt(2.0))
    t_min: float = 0.01
    grad_clip: float = 100.0
    likelihood: str = GAUSSIAN
    sigma_x: float = 0.1
    ce_weight: float = 1.0
    log_timing: bool = True
    eval_samples: int = 2000
    sampler_method: str = "pf_ode"
    sampler_steps: int = 100

    def __post_init__(self):
        if self.mode not in (MODE_LSGM, MODE_LNDSM, MODE_NDSM):
            raise ValueError(f"unknown training mode {self.mode!r}")
        for name in ("epochs", "batch_size", "n_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr_score <= 0 or self.pretrain_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_vae is not None and self.lr_vae < 0:
            raise ValueError("lr_vae must be >= 0")

    @property
    def resolved_lr_vae(self):
        if self.lr_vae is not None:
            return self.lr_vae
        return 1e-6 if self.mode == MODE_LNDSM else 1e-4

    @property
    def resolved_horizon(self):
        if self.horizon is not None:
            return self.horizon
        return 1.0 if self.mode == MODE_LSGM else 1.5


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam(params):
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              group="params"):
    """Bias-corrected Adam update applied in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {group}/{name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def clip_global_norm(grad_dicts, max_norm):
    total = 0.0
    for grads in grad_dicts:
        for g in grads.values():
            total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for grads in grad_dicts:
            for g in grads.values():
                g *= scale
    return norm


@dataclass
class TrainState:
    mode: str
    score: ScoreNet
    vae: Vae | None = None
    gmm: DiagonalGmm | None = None
    adam_vae: AdamState | None = None
    adam_score: AdamState | None = None
    train_rng: np.random.Generator = None
    eval_rng: np.random.Generator = None
    epoch: int = 0
    global_step: int = 0


class RunLog:
    """Accumulates CSV rows in memory, optionally mirroring to disk."""

    def __init__(self, path=None, header=TRAIN_CSV_HEADER):
        self.rows = []
        self.path = path
        self.header = header
        if path:
            with open(path, "w") as fh:
                fh.write(header + "\n")

    def append(self, row):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(row + "\n")


def _fmt(x):
    return f"{x:.17g}"


def _spawn_rngs(seed):
    children = np.random.SeedSequence(seed).spawn(5)
    return {name: np.random.default_rng(ss)
            for name, ss in zip(("init", "pretrain", "reference", "joint",
                                 "eval"), children)}


def build_spec(cfg, gmm=None):
    if cfg.mode == MODE_LSGM:
        return DiffusionSpec(VP, beta0=cfg.beta0, beta1=cfg.beta1,
                             horizon=cfg.resolved_horizon)
    if gmm is None:
        raise ValueError("nonlinear modes need a fitted reference mixture")
    return DiffusionSpec(LANGEVIN, reference=gmm, g_const=cfg.g_const,
                         horizon=cfg.resolved_horizon)


def init_state(cfg, data):
    rngs = _spawn_rngs(cfg.seed)
    init_rng = rngs["init"]
    if cfg.mode == MODE_NDSM:
        score = init_score_net(data.dim, cfg.resolved_horizon, init_rng,
                               hidden=cfg.hidden)
        return TrainState(mode=cfg.mode, score=score,
                          adam_score=init_adam(score.params),
                          train_rng=rngs["joint"], eval_rng=rngs["eval"])
    vae = init_vae(data.dim, cfg.latent_dim, init_rng, hidden=cfg.hidden,
                   likelihood=cfg.likelihood, sigma_x=cfg.sigma_x)
    score = init_score_net(cfg.latent_dim, cfg.resolved_horizon, init_rng,
                           hidden=cfg.hidden)
    return TrainState(mode=cfg.mode, score=score, vae=vae,
                      adam_vae=init_adam(vae.params),
                      adam_score=init_adam(score.params),
                      train_rng=rngs["joint"], eval_rng=rngs["eval"])


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    n_batches = n // batch_size
    for b in range(n_batches):
        yield perm[b * batch_size:(b + 1) * batch_size]


def pretrain_vae(cfg, data, log=None):
    """Train the VAE alone against the closed-form standard-normal prior."""
    if cfg.mode == MODE_NDSM:
        raise ValueError("the ambient mode has no VAE to pretrain")
    state = init_state(cfg, data)
    rng = _spawn_rngs(cfg.seed)["pretrain"]
    vae_params = state.vae.params
    for epoch in range(cfg.pretrain_epochs):
        for idx in _batches(data.X.shape[0], cfg.batch_size, rng):
            t0 = time.perf_counter()
            binding = ParamBinding(Tape())
            loss, bd = pretrain_loss(state.vae, data.X[idx], rng, binding)
            binding.tape.backward(loss)
            grads = binding.grads(vae_params)
            clip_global_norm([grads], cfg.grad_clip)
            adam_step(vae_params, grads, state.adam_vae, cfg.pretrain_lr,
                      group="vae")
            state.global_step += 1
            if log is not None:
                _log_step(log, cfg, epoch, state.global_step, MODE_PRETRAIN,
                          bd, t0)
    return state


def fit_latent_reference(state, cfg, data):
    """Fit the mixture reference on sampled latents of the training set."""
    rng = _spawn_rngs(cfg.seed)["reference"]
    z0 = encode_sample_np(state.vae, data.X, rng)
    seed = int(np.random.SeedSequence(cfg.seed).generate_state(1)[0])
    gmm = DiagonalGmm(n_components=cfg.gmm_components, seed=seed).fit(z0)
    return gmm


def _log_step(log, cfg, epoch, step, mode, bd, t0):
    wall = int(round(1000.0 * (time.perf_counter() - t0))) if cfg.log_timing else 0
    log.append(",".join([str(epoch), str(step), mode, _fmt(bd.total),
                         _fmt(bd.recon), _fmt(bd.neg_entropy), _fmt(bd.ce),
                         _fmt(bd.sq_norm), _fmt(bd.score_cv),
                         _fmt(bd.drift_cv), str(wall)]))


def _joint_step(state, cfg, spec, grid, xb):
    binding = ParamBinding(Tape())
    if cfg.mode == MODE_NDSM:
        traj = em_simulate(spec, xb, grid, state.train_rng)
        loss, terms = ndsm_loss(state.score, traj, state.train_rng, binding)
        bd = LossBreakdown(total=float(loss.data), recon=0.0, neg_entropy=0.0,
                           ce=float(loss.data), sq_norm=terms[0],
                           score_cv=terms[1], drift_cv=terms[2])
    else:
        loss, bd = vae_total_loss(state.vae, state.score, xb, spec, grid,
                                  cfg.mode, state.train_rng, binding,
                                  t_min=cfg.t_min)
    if not np.isfinite(loss.data):
        raise NumericalError("non-finite training loss")
    binding.tape.backward(loss)

    score_params = state.score.params
    score_grads = binding.grads(score_params)
    if state.vae is not None:
        vae_params = state.vae.params
        vae_grads = binding.grads(vae_params)
        clip_global_norm([vae_grads, score_grads], cfg.grad_clip)
        adam_step(vae_params, vae_grads, state.adam_vae, cfg.resolved_lr_vae,
                  group="vae")
    else:
        clip_global_norm([score_grads], cfg.grad_clip)
    adam_step(score_params, score_grads, state.adam_score, cfg.lr_score,
              group="score")
    return bd


def train(cfg, data, state=None, run_dir=None, train_log=None, eval_log=None,
          max_seconds=None):
    """Run (or resume) a full training job; returns the final state.

    When ``run_dir`` is set, checkpoints land in run_dir/checkpoints and
    a checkpoint is written at every eval point and at the end. On a
    numerical abort the error names the last good checkpoint.
    """
    if state is None:
        if cfg.mode == MODE_NDSM:
            state = init_state(cfg, data)
        else:
            state = pretrain_vae(cfg, data, log=train_log)
    if cfg.mode == MODE_LNDSM and state.gmm is None:
        state.gmm = fit_latent_reference(state, cfg, data)
    if cfg.mode == MODE_NDSM and state.gmm is None:
        seed = int(np.random.SeedSequence(cfg.seed).generate_state(1)[0])
        state.gmm = DiagonalGmm(n_components=cfg.gmm_components,
                                seed=seed).fit(data.X)

    spec = build_spec(cfg, state.gmm)
    grid = TimeGrid.uniform(cfg.resolved_horizon, cfg.n_steps)
    ckpt_dir = None
    last_ckpt = None
    if run_dir:
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

    started = time.perf_counter()
    try:
        while state.epoch < cfg.epochs:
            epoch = state.epoch
            for idx in _batches(data.X.shape[0], cfg.batch_size,
                                state.train_rng):
                t0 = time.perf_counter()
                bd = _joint_step(state, cfg, spec, grid, data.X[idx])
                state.global_step += 1
                if train_log is not None:
                    _log_step(train_log, cfg, epoch, state.global_step,
                              cfg.mode, bd, t0)
            state.epoch += 1
            due_eval = cfg.eval_every and state.epoch % cfg.eval_every == 0
            if due_eval:
                if eval_log is not None:
                    _log_eval(eval_log, evaluate_model(state, cfg, data), cfg,
                              state.epoch)
                if ckpt_dir:
                    last_ckpt = os.path.join(ckpt_dir,
                                             f"epoch{state.epoch:04d}.lnds")
                    checkpoint_save(state, last_ckpt)
            if max_seconds is not None and \
                    time.perf_counter() - started >= max_seconds:
                break
    except NumericalError as exc:
        hint = f"; last good checkpoint: {last_ckpt}" if last_ckpt else ""
        raise NumericalError(f"{exc}{hint}") from exc

    if eval_log is not None and not (cfg.eval_every
                                     and state.epoch % cfg.eval_every == 0):
        _log_eval(eval_log, evaluate_model(state, cfg, data), cfg, state.epoch)
    if ckpt_dir:
        last_ckpt = os.path.join(ckpt_dir, "final.lnds")
        checkpoint_save(state, last_ckpt)
    return state


def evaluate_model(state, cfg, data, n_samples=None, method=None, steps=None):
    """Generate samples from the current model and score them."""
    n = n_samples or cfg.eval_samples
    method = method or cfg.sampler_method
    spec = build_spec(cfg, state.gmm)
    sampler = SamplerConfig(method=method, steps=steps or cfg.sampler_steps,
                            t_end=default_t_end(spec))
    z = sample_latents(state.score, spec, sampler, n, state.eval_rng)
    samples = decode_samples(state.vae, z) if state.vae is not None else z

    ref_fracs = data.mode_fractions()
    gen_labels = assign_modes(data.assignment, samples)
    gen_fracs = np.bincount(gen_labels, minlength=data.n_modes) / n
    m = min(n, data.X.shape[0])
    feats = FixedRandomFeatures(in_dim=data.dim)
    return {
        "mf_kl": mode_fraction_kl(ref_fracs, gen_fracs),
        "sw": sliced_wasserstein(data.X[:m], samples[:m],
                                 rng=np.random.default_rng(0)),
        "frechet": frechet_surrogate(data.X[:m], samples[:m], feats),
        "is_surrogate": inception_surrogate(samples, data.assignment),
        "n_samples": n,
        "sampler": method,
        "samples": samples,
    }


def _log_eval(log, res, cfg, epoch):
    log.append(",".join([str(epoch), cfg.mode, _fmt(res["mf_kl"]),
                         _fmt(res["sw"]), _fmt(res["frechet"]),
                         _fmt(res["is_surrogate"]), str(res["n_samples"]),
                         res["sampler"], str(cfg.seed)]))


# -- checkpoint format ----------------------------------------------------

MAGIC = b"LNDS"
FORMAT_VERSION = 1
_KIND_F64, _KIND_U64, _KIND_STR = 0, 1, 2
_U64_MASK = (1 << 64) - 1


def _rng_to_u64(rng):
    st = rng.bit_generator.state
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    return np.array([s & _U64_MASK, s >> 64, inc & _U64_MASK, inc >> 64,
                     st["has_uint32"], st["uinteger"]], dtype=np.uint64)


def _rng_from_u64(arr):
    arr = [int(v) for v in arr]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": arr[0] | (arr[1] << 64),
                  "inc": arr[2] | (arr[3] << 64)},
        "has_uint32": arr[4], "uinteger": arr[5]}
    return rng


def _pack_record(name, payload):
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw
    if isinstance(payload, str):
        data = payload.encode()
        return head + struct.pack("<BI", _KIND_STR, len(data)) + data
    arr = np.ascontiguousarray(payload)
    kind = _KIND_U64 if arr.dtype == np.uint64 else _KIND_F64
    dtype = "<u8" if kind == _KIND_U64 else "<f8"
    body = struct.pack("<BI", kind, arr.ndim)
    body += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + body + arr.astype(dtype).tobytes()


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise DataError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return self.take(1)[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def checkpoint_save(state, path):
    """Versioned binary snapshot; load(save(s)) is bit-identical."""
    records = []
    arch = [f"mode = {state.mode}",
            f"score_horizon = {state.score.horizon!r}",
            f"score_n_freqs = {state.score.n_freqs}",
            f"score_dim = {state.score.dim}"]
    if state.vae is not None:
        arch += [f"likelihood = {state.vae.likelihood}",
                 f"sigma_x = {state.vae.sigma_x!r}",
                 f"latent_dim = {state.vae.latent_dim}"]
    records.append(("meta/arch", "\n".join(arch)))
    records.append(("meta/epoch", np.array([state.epoch, state.global_step],
                                           dtype=np.uint64)))
    if state.vae is not None:
        for k, v in state.vae.params.items():
            records.append((f"vae/{k}", v))
        records.append(("adam_vae/t", np.array([state.adam_vae.t],
                                               dtype=np.uint64)))
        for k, v in state.adam_vae.m.items():
            records.append((f"adam_vae/m/{k}", v))
        for k, v in state.adam_vae.v.items():
            records.append((f"adam_vae/v/{k}", v))
    for k, v in state.score.params.items():
        records.append((f"score/{k}", v))
    records.append(("adam_score/t", np.array([state.adam_score.t],
                                             dtype=np.uint64)))
    for k, v in state.adam_score.m.items():
        records.append((f"adam_score/m/{k}", v))
    for k, v in state.adam_score.v.items():
        records.append((f"adam_score/v/{k}", v))
    if state.gmm is not None:
        records.append(("gmm/weights", state.gmm.weights_))
        records.append(("gmm/means", state.gmm.means_))
        records.append(("gmm/variances", state.gmm.variances_))
    records.append(("rng/train", _rng_to_u64(state.train_rng)))
    records.append(("rng/eval", _rng_to_u64(state.eval_rng)))

    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(records))
    body += b"".join(_pack_record(name, payload) for name, payload in records)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def _read_records(path):
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataError("bad checkpoint magic")
    crc_stored = int.from_bytes(blob[-4:], "little")
    if zlib.crc32(blob[:-4]) != crc_stored:
        raise DataError("checkpoint checksum mismatch")
    rd = _Reader(blob[:-4])
    rd.take(4)
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    n_records = rd.u32()
    records = {}
    for _ in range(n_records):
        name = rd.take(rd.u32()).decode()
        kind = rd.u8()
        if kind == _KIND_STR:
            records[name] = rd.take(rd.u32()).decode()
            continue
        ndim = rd.u32()
        shape = tuple(rd.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        dtype = "<u8" if kind == _KIND_U64 else "<f8"
        arr = np.frombuffer(rd.take(8 * count), dtype=dtype).reshape(shape)
        records[name] = arr.astype(np.uint64 if kind == _KIND_U64
                                   else np.float64)
    if rd.pos != len(rd.blob):
        raise DataError("trailing bytes in checkpoint")
    return records


def checkpoint_load(path):
    records = _read_records(path)
    from .config import parse_config
    arch = parse_config(records["meta/arch"]).values

    def group(prefix):
        plen = len(prefix)
        return {k[plen:]: records[k].copy() for k in records
                if k.startswith(prefix)}

    score = ScoreNet(dim=int(arch["score_dim"]),
                     horizon=float(arch["score_horizon"]),
                     n_freqs=int(arch["score_n_freqs"]),
                     mlp=mlp_from_params(group("score/")))
    vae = None
    adam_vae = None
    if "vae/enc.w0" in records:
        vae_params = group("vae/")
        enc = mlp_from_params({k[4:]: v for k, v in vae_params.items()
                               if k.startswith("enc.")})
        dec = mlp_from_params({k[4:]: v for k, v in vae_params.items()
                               if k.startswith("dec.")})
        vae = Vae(data_dim=enc.sizes[0], latent_dim=int(arch["latent_dim"]),
                  encoder=enc, decoder=dec, likelihood=arch["likelihood"],
                  sigma_x=float(arch["sigma_x"]))
        adam_vae = AdamState(
            m={k: records[f"adam_vae/m/{k}"].copy() for k in vae.params},
            v={k: records[f"adam_vae/v/{k}"].copy() for k in vae.params},
            t=int(records["adam_vae/t"][0]))
    adam_score = AdamState(
        m={k: records[f"adam_score/m/{k}"].copy() for k in score.params},
        v={k: records[f"adam_score/v/{k}"].copy() for k in score.params},
        t=int(records["adam_score/t"][0]))
    gmm = None
    if "gmm/weights" in records:
        gmm = DiagonalGmm.from_params(records["gmm/weights"],
                                      records["gmm/means"],
                                      records["gmm/variances"])
    epoch, global_step = (int(v) for v in records["meta/epoch"])
    return TrainState(mode=arch["mode"], score=score, vae=vae, gmm=gmm,
                      adam_vae=adam_vae, adam_score=adam_score,
                      train_rng=_rng_from_u64(records["rng/train"]),
                      eval_rng=_rng_from_u64(records["rng/eval"]),
                      epoch=epoch, global_step=global_step)
