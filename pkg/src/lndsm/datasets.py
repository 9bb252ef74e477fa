"""Synthetic datasets and the on-disk formats they are stored in.

2-D point sets are written as headered CSV (columns x0,x1) with a
labels sidecar; 8x8 binary image sets are written as one raw byte per
pixel plus a PGM preview grid. Every dataset directory carries a
manifest recording kind, seed and counts, so files are reproducible
from the manifest alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .gmm import DiagonalGmm
from .validation import check_rng

GMM2D = "gmm2d"
RINGS2D = "rings2d"
TINY_DIGITS = "tiny_digits8x8"

# 8x8 pixel-art glyphs for digits 0-9, 8 strings of 8 chars each.
_GLYPHS = [
    ["..####..", ".##..##.", ".#....#.", ".#....#.", ".#....#.", ".#....#.",
     ".##..##.", "..####.."],
    ["...##...", "..###...", ".####...", "...##...", "...##...", "...##...",
     "...##...", ".######."],
    ["..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....",
     ".##.....", ".######."],
    ["..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".....##.",
     ".##..##.", "..####.."],
    ["....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..",
     "....##..", "....##.."],
    [".######.", ".##.....", ".#####..", ".....##.", ".....##.", ".....##.",
     ".##..##.", "..####.."],
    ["..####..", ".##..##.", ".##.....", ".#####..", ".##..##.", ".##..##.",
     ".##..##.", "..####.."],
    [".######.", ".....##.", "....##..", "....##..", "...##...", "...##...",
     "..##....", "..##...."],
    ["..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.",
     ".##..##.", "..####.."],
    ["..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", ".....##.",
     ".##..##.", "..####.."],
]


def digit_glyph(k):
    rows = _GLYPHS[k % len(_GLYPHS)]
    return np.array([[1.0 if c == "#" else 0.0 for c in row] for row in rows])


def _shrink_and_flip(glyph):
    # 180-degree rotation, then 2x downsampling placed in the centre:
    # the flipped mode is both upside down and half sized.
    flipped = glyph[::-1, ::-1]
    small = flipped.reshape(4, 2, 4, 2).max(axis=(1, 3))
    out = np.zeros_like(glyph)
    out[2:6, 2:6] = small
    return out


@dataclass
class Dataset:
    kind: str
    X: np.ndarray
    labels: np.ndarray
    seed: int
    n_modes: int
    # Moment-matched per-mode Gaussians used for mode assignment.
    assignment: DiagonalGmm | None = None
    image_shape: tuple | None = None
    params: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.X.shape[1]

    def mode_fractions(self):
        counts = np.bincount(self.labels, minlength=self.n_modes)
        return counts / counts.sum()


def _assignment_from_labels(X, labels, n_modes, var_floor=1e-4):
    weights = np.bincount(labels, minlength=n_modes) / labels.shape[0]
    means = np.stack([X[labels == k].mean(axis=0) for k in range(n_modes)])
    variances = np.stack([
        np.maximum(X[labels == k].var(axis=0), var_floor)
        for k in range(n_modes)
    ])
    return DiagonalGmm.from_params(weights, means, variances)


def make_gmm2d(n, seed, n_modes=3, weights=(0.5, 0.3, 0.2), separation=4.0,
               mode_var=0.3):
    """Points from a known 2-D mixture with means on a circle."""
    rng = check_rng(seed)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != n_modes:
        raise DataError("weights length must equal the number of modes")
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    means = separation * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    variances = np.full((n_modes, 2), mode_var)
    gen = DiagonalGmm.from_params(weights / weights.sum(), means, variances)
    X, labels = gen.sample(n, rng, return_components=True)
    return Dataset(kind=GMM2D, X=X, labels=labels, seed=seed, n_modes=n_modes,
                   assignment=gen,
                   params={"weights": weights.tolist(),
                           "separation": separation, "mode_var": mode_var})


def make_rings2d(n, seed, radii=(1.0, 3.0), radial_std=0.1):
    """Two concentric rings; the label is the ring index."""
    rng = check_rng(seed)
    labels = rng.integers(0, len(radii), size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.asarray(radii)[labels] + radial_std * rng.standard_normal(n)
    X = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    ds = Dataset(kind=RINGS2D, X=X, labels=labels, seed=seed,
                 n_modes=len(radii),
                 params={"radii": list(radii), "radial_std": radial_std})
    ds.assignment = _assignment_from_labels(X, labels, ds.n_modes)
    return ds


def make_tiny_digits(n, seed, modes=3, flip_prob=0.5, pixel_noise=0.02):
    """8x8 binary glyph images; with probability flip_prob a sample is
    rotated 180 degrees and shrunk to half size (the structured mode).
    The label is the flip indicator."""
    rng = check_rng(seed)
    digits = rng.integers(0, modes, size=n)
    flips = rng.random(n) < flip_prob
    X = np.empty((n, 64))
    for i in range(n):
        glyph = digit_glyph(int(digits[i]))
        if flips[i]:
            glyph = _shrink_and_flip(glyph)
        noise_mask = rng.random(64) < pixel_noise
        X[i] = np.where(noise_mask, 1.0 - glyph.reshape(-1), glyph.reshape(-1))
    labels = flips.astype(int)
    ds = Dataset(kind=TINY_DIGITS, X=X, labels=labels, seed=seed, n_modes=2,
                 image_shape=(8, 8),
                 params={"modes": modes, "flip_prob": flip_prob,
                         "pixel_noise": pixel_noise})
    ds.assignment = _assignment_from_labels(X, labels, 2, var_floor=0.02)
    return ds


def make_dataset(kind, n, seed, **kwargs):
    if kind == GMM2D:
        return make_gmm2d(n, seed, **kwargs)
    if kind == RINGS2D:
        return make_rings2d(n, seed, **kwargs)
    if kind == TINY_DIGITS:
        return make_tiny_digits(n, seed, **kwargs)
    raise DataError(f"unknown dataset kind {kind!r}")


# -- file formats ---------------------------------------------------------


def write_points_csv(path, X, columns=None):
    X = np.asarray(X, dtype=np.float64)
    columns = columns or [f"x{i}" for i in range(X.shape[1])]
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in X:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_points_csv(path):
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read points csv {path}: {exc}") from exc
    if data.shape[1] != len(header):
        raise DataError(f"column count mismatch in {path}")
    return data


def write_labels_csv(path, labels):
    with open(path, "w") as fh:
        fh.write("label\n")
        for v in labels:
            fh.write(f"{int(v)}\n")


def read_labels_csv(path):
    try:
        with open(path) as fh:
            fh.readline()
            return np.loadtxt(fh, dtype=int, ndmin=1)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read labels csv {path}: {exc}") from exc


def write_image_bytes(path, X):
    """Raw u8 pixels, one byte per pixel, samples concatenated in order."""
    arr = np.asarray(X)
    if np.any(arr < 0) or np.any(arr > 1):
        raise DataError("image pixels must lie in [0, 1]")
    with open(path, "wb") as fh:
        fh.write(np.round(arr * 255).astype(np.uint8).tobytes())


def read_image_bytes(path, n_pixels):
    raw = np.frombuffer(open(path, "rb").read(), dtype=np.uint8)
    if raw.size % n_pixels != 0:
        raise DataError(f"truncated image file {path}")
    return raw.reshape(-1, n_pixels).astype(np.float64) / 255.0


def write_pgm_grid(path, X, image_shape, grid_cols=8, max_images=64):
    """P5 PGM preview: up to ``max_images`` tiles with 1-pixel gutters."""
    h, w = image_shape
    imgs = np.asarray(X[:max_images]).reshape(-1, h, w)
    n = imgs.shape[0]
    rows = (n + grid_cols - 1) // grid_cols
    canvas = np.zeros((rows * (h + 1) + 1, grid_cols * (w + 1) + 1))
    for i, img in enumerate(imgs):
        r, c = divmod(i, grid_cols)
        canvas[1 + r * (h + 1):1 + r * (h + 1) + h,
               1 + c * (w + 1):1 + c * (w + 1) + w] = img
    data = np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def save_dataset(ds, out_dir):
    """Write data + labels (+ preview) and return the file list."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if ds.image_shape is None:
        data_path = os.path.join(out_dir, "data.csv")
        write_points_csv(data_path, ds.X)
    else:
        data_path = os.path.join(out_dir, "data.u8")
        write_image_bytes(data_path, ds.X)
        preview = os.path.join(out_dir, "preview.pgm")
        write_pgm_grid(preview, ds.X, ds.image_shape)
        written.append(preview)
    labels_path = os.path.join(out_dir, "labels.csv")
    write_labels_csv(labels_path, ds.labels)
    written = [data_path, labels_path] + written
    return written


def load_dataset(manifest):
    """Rebuild a dataset from its manifest dict (see cli module)."""
    kind = manifest["kind"]
    n = int(manifest["n_train"])
    seed = int(manifest["seed"])
    kwargs = {}
    if kind == GMM2D:
        kwargs = {"n_modes": int(manifest["n_modes"]),
                  "weights": [float(v) for v in str(manifest["weights"]).split()],
                  "separation": float(manifest["separation"]),
                  "mode_var": float(manifest["mode_var"])}
    elif kind == TINY_DIGITS:
        kwargs = {"modes": int(manifest["modes"]),
                  "flip_prob": float(manifest["flip_prob"]),
                  "pixel_noise": float(manifest["pixel_noise"])}
    return make_dataset(kind, n, seed, **kwargs)
