"""Command-line entry point.

Subcommands: make-data, pretrain, train, sample, eval, check, inspect.
All runs are driven by a sectioned key = value config (see config.py);
artifacts land in <root>/<name>/ with the config echoed verbatim and a
manifest carrying the seed and build identifier.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure, 4 check-suite failure. The output root honours the
LNDSM_OUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys

import numpy as np

from . import __version__
from .config import load_config, parse_config, validate_keys, write_kv
from .datasets import (TINY_DIGITS, load_dataset, make_dataset, save_dataset,
                       write_pgm_grid, write_points_csv)
from .errors import CheckFailure, DataError, NumericalError, UsageError
from .samplers import SamplerConfig, decode_samples, default_t_end, sample_latents
from .training import (EVAL_CSV_HEADER, RunLog, TrainConfig, build_spec,
                       checkpoint_load, checkpoint_save, evaluate_model,
                       pretrain_vae, train)
from .validation import check_rng

ENV_OUT_ROOT = "LNDSM_OUT_ROOT"

ALLOWED_KEYS = {
    "dataset.kind", "dataset.n_train", "dataset.seed", "dataset.n_modes",
    "dataset.weights", "dataset.separation", "dataset.mode_var",
    "dataset.modes", "dataset.flip_prob", "dataset.pixel_noise",
    "train.mode", "train.epochs", "train.batch_size", "train.lr_vae",
    "train.lr_score", "train.pretrain_epochs", "train.pretrain_lr",
    "train.seed", "train.horizon", "train.n_steps", "train.eval_every",
    "train.latent_dim", "train.hidden", "train.gmm_components",
    "train.beta0", "train.beta1", "train.g_const", "train.t_min",
    "train.grad_clip", "train.likelihood", "train.sigma_x",
    "train.ce_weight", "train.log_timing", "train.eval_samples",
    "train.sampler_method", "train.sampler_steps",
    "sampler.method", "sampler.steps", "sampler.t_end", "sampler.n_samples",
    "sampler.seed",
    "output.root", "output.name",
}


def build_id():
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5)
        suffix = rev.stdout.strip() if rev.returncode == 0 else "local"
    except OSError:
        suffix = "local"
    return f"lndsm-{__version__}+{suffix or 'local'}"


def _dataset_kwargs(cfg):
    kind = cfg.get_str("dataset.kind")
    kwargs = {}
    if kind == "gmm2d":
        kwargs["n_modes"] = cfg.get_int("dataset.n_modes", 3)
        kwargs["weights"] = cfg.get_floats("dataset.weights",
                                           [0.5, 0.3, 0.2][:kwargs["n_modes"]])
        kwargs["separation"] = cfg.get_float("dataset.separation", 4.0)
        kwargs["mode_var"] = cfg.get_float("dataset.mode_var", 0.3)
    elif kind == TINY_DIGITS:
        kwargs["modes"] = cfg.get_int("dataset.modes", 3)
        kwargs["flip_prob"] = cfg.get_float("dataset.flip_prob", 0.5)
        kwargs["pixel_noise"] = cfg.get_float("dataset.pixel_noise", 0.02)
    return kind, kwargs


def dataset_from_config(cfg):
    kind, kwargs = _dataset_kwargs(cfg)
    return make_dataset(kind, cfg.get_int("dataset.n_train", 6000),
                        cfg.get_int("dataset.seed", 0), **kwargs)


def train_config_from(cfg):
    kwargs = dict(
        mode=cfg.get_str("train.mode", "lndsm"),
        epochs=cfg.get_int("train.epochs", 50),
        batch_size=cfg.get_int("train.batch_size", 60),
        lr_score=cfg.get_float("train.lr_score", 3e-4),
        pretrain_epochs=cfg.get_int("train.pretrain_epochs", 200),
        pretrain_lr=cfg.get_float("train.pretrain_lr", 1e-3),
        seed=cfg.get_int("train.seed", 0),
        n_steps=cfg.get_int("train.n_steps", 100),
        eval_every=cfg.get_int("train.eval_every", 0),
        latent_dim=cfg.get_int("train.latent_dim", 2),
        hidden=cfg.get_int("train.hidden", 64),
        gmm_components=cfg.get_int("train.gmm_components", 3),
        beta0=cfg.get_float("train.beta0", 0.1),
        beta1=cfg.get_float("train.beta1", 20.0),
        g_const=cfg.get_float("train.g_const", float(np.sqrt(2.0))),
        t_min=cfg.get_float("train.t_min", 0.01),
        grad_clip=cfg.get_float("train.grad_clip", 100.0),
        likelihood=cfg.get_str("train.likelihood", "gaussian_fixed_var"),
        sigma_x=cfg.get_float("train.sigma_x", 0.1),
        log_timing=cfg.get_bool("train.log_timing", True),
        eval_samples=cfg.get_int("train.eval_samples", 2000),
        sampler_method=cfg.get_str("train.sampler_method", "pf_ode"),
        sampler_steps=cfg.get_int("train.sampler_steps", 100),
    )
    if "train.lr_vae" in cfg:
        kwargs["lr_vae"] = cfg.get_float("train.lr_vae")
    if "train.horizon" in cfg:
        kwargs["horizon"] = cfg.get_float("train.horizon")
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def resolve_run_dir(cfg, default_name):
    root = os.environ.get(ENV_OUT_ROOT) or cfg.get_str("output.root", "runs")
    name = cfg.get_str("output.name", default_name)
    run_dir = os.path.join(root, name)
    os.makedirs(run_dir, exist_ok=True)
    return run_dir


def write_run_manifest(run_dir, cfg, subcommand, extra=None):
    pairs = {"subcommand": subcommand,
             "seed": cfg.get_int("train.seed", cfg.get_int("dataset.seed", 0)),
             "build_id": build_id()}
    pairs.update(extra or {})
    write_kv(os.path.join(run_dir, "manifest.txt"), pairs)


def echo_config(run_dir, cfg):
    with open(os.path.join(run_dir, "config.echo"), "w") as fh:
        fh.write(cfg.text)


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


# -- subcommands ----------------------------------------------------------


def cmd_make_data(cfg, args):
    run_dir = resolve_run_dir(cfg, "dataset")
    ds = dataset_from_config(cfg)
    files = save_dataset(ds, run_dir)
    counts = {f"count_{k}": int(c) for k, c in
              enumerate(np.bincount(ds.labels, minlength=ds.n_modes))}
    extra = {"kind": ds.kind, "n_train": ds.X.shape[0], **counts,
             "files": " ".join(os.path.basename(f) for f in files)}
    for key, val in ds.params.items():
        extra[key] = " ".join(str(v) for v in val) \
            if isinstance(val, list) else val
    write_run_manifest(run_dir, cfg, "make-data",
                       {"seed": ds.seed, **extra})
    echo_config(run_dir, cfg)
    print(f"wrote {len(files)} dataset files to {run_dir}")
    return 0


def cmd_pretrain(cfg, args):
    run_dir = resolve_run_dir(cfg, "pretrain")
    echo_config(run_dir, cfg)
    data = dataset_from_config(cfg)
    tc = train_config_from(cfg)
    log = RunLog(os.path.join(run_dir, "train.csv"))
    state = pretrain_vae(tc, data, log=log)
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    path = os.path.join(ckpt_dir, "pretrained.lnds")
    checkpoint_save(state, path)
    write_run_manifest(run_dir, cfg, "pretrain",
                       {"checkpoint": os.path.basename(path)})
    print(f"pretrained VAE for {tc.pretrain_epochs} epochs -> {path}")
    return 0


def cmd_train(cfg, args):
    run_dir = resolve_run_dir(cfg, "train")
    echo_config(run_dir, cfg)
    data = dataset_from_config(cfg)
    tc = train_config_from(cfg)
    state = checkpoint_load(args.checkpoint) if args.checkpoint else None
    train_log = RunLog(os.path.join(run_dir, "train.csv"))
    eval_log = RunLog(os.path.join(run_dir, "eval.csv"),
                      header=EVAL_CSV_HEADER)
    state = train(tc, data, state=state, run_dir=run_dir,
                  train_log=train_log, eval_log=eval_log)
    write_run_manifest(run_dir, cfg, "train",
                       {"mode": tc.mode, "epochs": state.epoch,
                        "threads": args.threads})
    print(f"trained {tc.mode} for {state.epoch} epochs; "
          f"artifacts in {run_dir}")
    return 0


def _load_state(args, run_dir):
    path = args.checkpoint or os.path.join(run_dir, "checkpoints",
                                           "final.lnds")
    if not os.path.exists(path):
        raise DataError(f"missing checkpoint {path}")
    return checkpoint_load(path), path


def cmd_sample(cfg, args):
    run_dir = resolve_run_dir(cfg, "train")
    state, ckpt_path = _load_state(args, run_dir)
    tc = train_config_from(cfg)
    method = cfg.get_str("sampler.method", tc.sampler_method)
    n = cfg.get_int("sampler.n_samples", 10_000)
    steps = cfg.get_int("sampler.steps", tc.sampler_steps)
    seed = cfg.get_int("sampler.seed", tc.seed)
    spec = build_spec(tc, state.gmm)
    t_end = cfg.get_float("sampler.t_end", default_t_end(spec))
    sampler = SamplerConfig(method=method, steps=steps, t_end=t_end)
    z = sample_latents(state.score, spec, sampler, n, check_rng(seed))
    samples = decode_samples(state.vae, z) if state.vae is not None else z

    out_dir = os.path.join(run_dir, "samples")
    os.makedirs(out_dir, exist_ok=True)
    if samples.shape[1] == 64:
        out_path = os.path.join(out_dir, f"samples_{method}.u8")
        from .datasets import write_image_bytes
        write_image_bytes(out_path, np.clip(samples, 0.0, 1.0))
        write_pgm_grid(os.path.join(out_dir, f"samples_{method}.pgm"),
                       np.clip(samples, 0.0, 1.0), (8, 8))
    else:
        out_path = os.path.join(out_dir, f"samples_{method}.csv")
        write_points_csv(out_path, samples)
    provenance = {"sampler": method, "steps": steps, "t_end": t_end,
                  "seed": seed, "n": n, "checkpoint": ckpt_path,
                  "checkpoint_sha256": _sha256(ckpt_path),
                  "build_id": build_id()}
    with open(os.path.join(out_dir, "provenance.json"), "w") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
    print(f"wrote {n} samples to {out_path}")
    return 0


def cmd_eval(cfg, args):
    run_dir = resolve_run_dir(cfg, "train")
    state, _ = _load_state(args, run_dir)
    tc = train_config_from(cfg)
    data = dataset_from_config(cfg)
    n = cfg.get_int("sampler.n_samples", tc.eval_samples)
    method = cfg.get_str("sampler.method", tc.sampler_method)
    steps = cfg.get_int("sampler.steps", tc.sampler_steps)
    res = evaluate_model(state, tc, data, n_samples=n, method=method,
                         steps=steps)
    path = os.path.join(run_dir, "eval.csv")
    if not os.path.exists(path):
        with open(path, "w") as fh:
            fh.write(EVAL_CSV_HEADER + "\n")
    with open(path, "a") as fh:
        fh.write(",".join([str(state.epoch), tc.mode,
                           f"{res['mf_kl']:.17g}", f"{res['sw']:.17g}",
                           f"{res['frechet']:.17g}",
                           f"{res['is_surrogate']:.17g}",
                           str(res["n_samples"]), res["sampler"],
                           str(tc.seed)]) + "\n")
    print(f"eval: mode_fraction_kl={res['mf_kl']:.5f} sw={res['sw']:.4f} "
          f"frechet={res['frechet']:.4f} is={res['is_surrogate']:.3f}")
    return 0


def cmd_check(cfg, args):
    from .checks import run_checks, INVARIANTS
    all_passed, results = run_checks(fail_fast=args.fail_fast,
                                     select=args.module)
    report = {
        "passed": all_passed,
        "build_id": build_id(),
        "coverage": {m: ids for m, ids in INVARIANTS.items()},
        "results": [{"module": r.module, "invariant": r.invariant,
                     "passed": r.passed, "detail": r.detail,
                     "seconds": round(r.seconds, 3)} for r in results],
    }
    text = json.dumps(report, indent=2)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    print(text)
    if not all_passed:
        raise CheckFailure("one or more checks failed")
    return 0


def cmd_inspect(cfg, args):
    run_dir = resolve_run_dir(cfg, "train")
    state, path = _load_state(args, run_dir)
    print(f"checkpoint: {path}")
    print(f"mode: {state.mode}  epoch: {state.epoch}  "
          f"step: {state.global_step}")
    if state.vae is not None:
        print(f"vae: data_dim={state.vae.data_dim} "
              f"latent_dim={state.vae.latent_dim} "
              f"likelihood={state.vae.likelihood}")
    print(f"score net: dim={state.score.dim} horizon={state.score.horizon}")
    if state.gmm is None:
        print("reference mixture: none")
        return 0
    print(f"reference mixture: {state.gmm.n_components} components, "
          f"dim {state.gmm.dim}")
    for k in range(state.gmm.n_components):
        mean = " ".join(f"{v: .4f}" for v in state.gmm.means_[k])
        var = " ".join(f"{v: .4f}" for v in state.gmm.variances_[k])
        print(f"  [{k}] weight={state.gmm.weights_[k]:.4f} "
              f"mean=({mean}) var=({var})")
    return 0


# -- driver ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="lndsm", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("make-data", "pretrain", "train", "sample", "eval",
                 "check", "inspect"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "check"),
                       help="path to the key = value config file")
        p.add_argument("--threads", type=int, default=1,
                       help="1 = bit-exact serial execution (default)")
        if name in ("train", "sample", "eval", "inspect"):
            p.add_argument("--checkpoint", default=None)
        if name == "check":
            p.add_argument("--module", default=None,
                           help="restrict checks to one module")
            p.add_argument("--fail-fast", action="store_true")
            p.add_argument("--report", default=None,
                           help="also write the JSON report here")
    return parser


_COMMANDS = {
    "make-data": cmd_make_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "check": cmd_check,
    "inspect": cmd_inspect,
}


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        if args.config:
            cfg = load_config(args.config)
            validate_keys(cfg, ALLOWED_KEYS)
        else:
            cfg = parse_config("")
        return _COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CheckFailure as exc:
        print(f"check failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
