"""Digit-image plumbing: the IDX binary container, uniform dequantization
with the logit transform and its exact inverse, label-mixture likelihoods,
and the Jacobian-corrected bits-per-pixel conversion."""

from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError
from ..tensor_core import logsumexp

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
DEFAULT_LAMBDA = 1e-6


def save_idx(path, arr):
    """Write an unsigned-byte array in the IDX container (big-endian magic and
    dimension sizes, then raw bytes)."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("IDX payload must be uint8")
    if arr.ndim not in (1, 3):
        raise ValueError("expected labels (n,) or images (n, rows, cols)")
    magic = IDX_MAGIC_LABELS if arr.ndim == 1 else IDX_MAGIC_IMAGES
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        for dim in arr.shape:
            fh.write(struct.pack(">I", dim))
        fh.write(arr.tobytes(order="C"))


def load_idx(path):
    """Read an IDX file back into a uint8 array; malformed magic, dimension
    counts, or truncated payloads raise FormatError."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError("IDX file too short for a magic number")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_MAGIC_LABELS:
        ndim = 1
    elif magic == IDX_MAGIC_IMAGES:
        ndim = 3
    else:
        raise FormatError(f"unrecognized IDX magic 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError("IDX header truncated")
    shape = struct.unpack(f">{ndim}I", raw[4:head])
    expected = int(np.prod(shape))
    payload = raw[head:]
    if len(payload) != expected:
        raise FormatError(f"IDX payload holds {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def dequantize_logit(pixels, lam=DEFAULT_LAMBDA, seed=None, noise=None, levels=256):
    """Map integer pixels to unbounded reals: add uniform [0,1) noise, scale
    into (lam, 1-lam), and take the logit. Pass an explicit noise array for a
    deterministic transform; otherwise the seed drives the draw."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if noise is None:
        rng = np.random.default_rng(seed if seed is not None else 0)
        noise = rng.random(pixels.shape)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != pixels.shape:
            raise ValueError("noise must match the pixel shape")
    p = (pixels + noise) / levels
    q = lam + (1.0 - 2.0 * lam) * p
    return np.log(q) - np.log1p(-q)


def logit_to_pixels(x, lam=DEFAULT_LAMBDA, levels=256):
    """Exact inverse of dequantize_logit up to the added noise: returns the
    continuous pixel value pixels + noise."""
    x = np.asarray(x, dtype=np.float64)
    q = 1.0 / (1.0 + np.exp(-x))
    return (q - lam) / (1.0 - 2.0 * lam) * levels


def logit_jacobian_log(x, lam=DEFAULT_LAMBDA, levels=256):
    """log |d logit-value / d pixel-value| per coordinate, used to convert
    logit-space likelihoods into pixel-space ones."""
    x = np.asarray(x, dtype=np.float64)
    # -log sigmoid(x) - log sigmoid(-x) written through softplus for stability
    softplus = lambda v: np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0.0)
    return np.log1p(-2.0 * lam) - np.log(levels) + softplus(x) + softplus(-x)


def bits_per_pixel(logit_log_likelihood, x_logit, lam=DEFAULT_LAMBDA, levels=256):
    """Convert per-sample logit-space log-likelihoods into pixel-space bits
    per pixel using the exact change of variables of the dequantization map."""
    logit_log_likelihood = np.asarray(logit_log_likelihood, dtype=np.float64)
    x_logit = np.atleast_2d(np.asarray(x_logit, dtype=np.float64))
    d = x_logit.shape[1]
    pixel_ll = logit_log_likelihood + logit_jacobian_log(x_logit, lam, levels).sum(axis=1)
    return float(-pixel_ll.mean() / (d * np.log(2.0)))


def label_mixture_log_prob(model, x, labels=tuple(range(10)), prior=0.1):
    """Joint likelihood with the class marginalized out under a uniform prior:
    logsumexp over labels of log p(x | label) + log prior."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    per_label = np.stack(
        [model.log_prob_for_condition(x, np.array([float(lab)])) for lab in labels],
        axis=1,
    )
    return logsumexp(per_label + np.log(prior), axis=1)


def digits_dataset(lam=DEFAULT_LAMBDA, seed=0, holdout=0.2):
    """The bundled 8x8 digit images (pixel levels 0..16), dequantized into
    logit space with scalar labels as conditions; returns (train, test)."""
    from sklearn.datasets import load_digits

    from ..training import ConditionedSamples

    digits = load_digits()
    pixels = digits.images.astype(np.uint8)  # (n, 8, 8), values 0..16
    labels = digits.target.astype(np.float64)
    n = pixels.shape[0]
    x = dequantize_logit(pixels.reshape(n, 64), lam=lam, seed=seed, levels=17)
    rng = np.random.default_rng(int(seed))
    perm = rng.permutation(n)
    n_test = int(round(holdout * n))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    return (
        ConditionedSamples(x[train_idx], labels[train_idx]),
        ConditionedSamples(x[test_idx], labels[test_idx]),
    )
