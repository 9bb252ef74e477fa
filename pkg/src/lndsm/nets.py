"""Small MLP building blocks: score network and diagonal-Gaussian VAE.

Every network stores its parameters as a flat name -> float64 array dict
so the optimizer, the checkpoint format and the gradient checks all see
one canonical layout. A ``ParamBinding`` wraps those arrays as taped
leaves for one loss evaluation and collects their gradients afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .validation import check_rng

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_STD_MIN = -7.0
LOG_STD_MAX = 2.0

BERNOULLI = "bernoulli_logits"
GAUSSIAN = "gaussian_fixed_var"


class ParamBinding:
    """Per-evaluation map from parameter arrays to taped leaf tensors."""

    def __init__(self, tape):
        self.tape = tape
        self._leaves = {}

    def leaf(self, arr):
        key = id(arr)
        if key not in self._leaves:
            self._leaves[key] = self.tape.param(arr)
        return self._leaves[key]

    def grads(self, params):
        """Gradient dict matching ``params``; zeros where unused."""
        out = {}
        for name, arr in params.items():
            leaf = self._leaves.get(id(arr))
            g = leaf.grad if leaf is not None and leaf.grad is not None else None
            out[name] = np.zeros_like(arr) if g is None else g
        return out


@dataclass
class Mlp:
    """Fully connected layers; weights w{i} (in, out) and biases b{i}."""

    sizes: tuple
    params: dict
    activation: str = "silu"

    @property
    def n_layers(self):
        return len(self.sizes) - 1


def init_mlp(sizes, rng, zero_last=False, activation="silu"):
    """Uniform fan-in init; optionally zero the final layer."""
    rng = check_rng(rng)
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"b{i}"] = rng.uniform(-bound, bound, size=fan_out)
    if zero_last:
        last = len(sizes) - 2
        params[f"w{last}"][:] = 0.0
        params[f"b{last}"][:] = 0.0
    return Mlp(sizes=tuple(sizes), params=params, activation=activation)


def mlp_from_params(params, activation="silu"):
    """Rebuild an Mlp from a name -> array dict (e.g. a checkpoint)."""
    n_layers = sum(1 for k in params if k.startswith("w"))
    sizes = [params["w0"].shape[0]]
    for i in range(n_layers):
        w = params[f"w{i}"]
        if w.shape[0] != sizes[-1]:
            raise ValueError("layer shapes do not compose")
        sizes.append(w.shape[1])
    return Mlp(sizes=tuple(sizes),
               params={k: np.asarray(v, dtype=np.float64) for k, v in params.items()},
               activation=activation)


def mlp_apply(mlp, x, binding):
    """Taped forward pass; hidden layers use the configured activation."""
    h = x
    for i in range(mlp.n_layers):
        w = binding.leaf(mlp.params[f"w{i}"])
        b = binding.leaf(mlp.params[f"b{i}"])
        h = ad.add(ad.matmul(h, w), b)
        if i < mlp.n_layers - 1:
            h = ad.silu(h)
    return h


def mlp_apply_np(mlp, x):
    h = np.asarray(x, dtype=np.float64)
    for i in range(mlp.n_layers):
        h = h @ mlp.params[f"w{i}"] + mlp.params[f"b{i}"]
        if i < mlp.n_layers - 1:
            h = ad._silu_np(h)
    return h


# -- score network -----------------------------------------------------


@dataclass
class ScoreNet:
    """Time-conditioned vector field on R^d.

    The time enters through sinusoidal features sin(2^k pi t / T),
    cos(2^k pi t / T) for k = 0..n_freqs-1, concatenated to the state.
    """

    dim: int
    horizon: float
    mlp: Mlp
    n_freqs: int = 8

    @property
    def params(self):
        return self.mlp.params


def init_score_net(dim, horizon, rng, hidden=64, n_hidden_layers=2, n_freqs=8,
                   zero_last=True):
    sizes = [dim + 2 * n_freqs] + [hidden] * n_hidden_layers + [dim]
    return ScoreNet(dim=dim, horizon=horizon, n_freqs=n_freqs,
                    mlp=init_mlp(sizes, rng, zero_last=zero_last))


def time_features(t, horizon, n_freqs, batch):
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    phase = np.pi * t[:, None] / horizon * (2.0 ** np.arange(n_freqs))[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def score_apply(net, z, t, binding):
    """Taped s(z, t); ``t`` is a scalar or one time per row."""
    feats = time_features(t, net.horizon, net.n_freqs, z.shape[0])
    x = ad.concat([z, binding.tape.const(feats)], axis=1)
    return mlp_apply(net.mlp, x, binding)


def score_apply_np(net, z, t):
    z = np.asarray(z, dtype=np.float64)
    feats = time_features(t, net.horizon, net.n_freqs, z.shape[0])
    return mlp_apply_np(net.mlp, np.concatenate([z, feats], axis=1))


# -- VAE ----------------------------------------------------------------


@dataclass
class Vae:
    """MLP encoder/decoder pair with a diagonal-Gaussian latent."""

    data_dim: int
    latent_dim: int
    encoder: Mlp
    decoder: Mlp
    likelihood: str = GAUSSIAN
    sigma_x: float = 0.1

    @property
    def params(self):
        merged = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        merged.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        return merged


def init_vae(data_dim, latent_dim, rng, hidden=64, n_hidden_layers=2,
             likelihood=GAUSSIAN, sigma_x=0.1):
    rng = check_rng(rng)
    enc_sizes = [data_dim] + [hidden] * n_hidden_layers + [2 * latent_dim]
    dec_sizes = [latent_dim] + [hidden] * n_hidden_layers + [data_dim]
    return Vae(data_dim=data_dim, latent_dim=latent_dim,
               encoder=init_mlp(enc_sizes, rng),
               decoder=init_mlp(dec_sizes, rng),
               likelihood=likelihood, sigma_x=sigma_x)


def vae_encode(vae, x, rng, binding):
    """Reparameterised encoding of a constant data batch ``x``.

    Returns taped (z0, mean, log_std) with log_std clamped to the
    documented range so entropies and scales stay bounded.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != vae.data_dim:
        raise ValueError(f"x has dim {x.shape[1]}, encoder expects {vae.data_dim}")
    h = mlp_apply(vae.encoder, binding.tape.const(x), binding)
    mean = ad.slice_cols(h, 0, vae.latent_dim)
    log_std = ad.clip(ad.slice_cols(h, vae.latent_dim, 2 * vae.latent_dim),
                      LOG_STD_MIN, LOG_STD_MAX)
    eps = check_rng(rng).standard_normal((x.shape[0], vae.latent_dim))
    z0 = ad.add(mean, ad.mul(ad.exp(log_std), eps))
    return z0, mean, log_std


def encode_np(vae, x):
    h = mlp_apply_np(vae.encoder, x)
    mean = h[:, :vae.latent_dim]
    log_std = np.clip(h[:, vae.latent_dim:], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def encode_sample_np(vae, x, rng):
    mean, log_std = encode_np(vae, x)
    eps = check_rng(rng).standard_normal(mean.shape)
    return mean + np.exp(log_std) * eps


def vae_decode_nll(vae, z0, x, binding):
    """Mean over the batch of the per-sample negative log-likelihood."""
    x = np.asarray(x, dtype=np.float64)
    out = mlp_apply(vae.decoder, z0, binding)
    if vae.likelihood == BERNOULLI:
        if np.any(x < 0) or np.any(x > 1):
            raise ValueError("Bernoulli targets must lie in [0, 1]")
        # softplus(l) - l*x is the stable logit cross entropy.
        per_elem = ad.sub(ad.softplus(out), ad.mul(out, x))
        return ad.tmean(ad.tsum(per_elem, axis=1))
    if vae.likelihood == GAUSSIAN:
        var = vae.sigma_x ** 2
        sq = ad.tsum(ad.square(ad.sub(out, x)), axis=1)
        const = 0.5 * vae.data_dim * (LOG_2PI + np.log(var))
        return ad.add(ad.tmean(ad.mul(sq, 0.5 / var)), const)
    raise ValueError(f"unknown likelihood {vae.likelihood!r}")


def decode_np(vae, z, threshold=None):
    """Decode latents to data space: probabilities or Gaussian means."""
    out = mlp_apply_np(vae.decoder, z)
    if vae.likelihood == BERNOULLI:
        probs = ad._sigmoid_np(out)
        if threshold is not None:
            return (probs >= threshold).astype(np.float64)
        return probs
    return out


def encoder_neg_entropy(log_std):
    """Mean over the batch of E_q[log q] for the diagonal Gaussian."""
    per_sample = ad.add(ad.tsum(log_std, axis=1),
                        0.5 * log_std.shape[1] * (LOG_2PI + 1.0))
    return ad.neg(ad.tmean(per_sample))
