"""Bilinear resampling with half-pixel centres (``align_corners=False``).

Resizing is separable, so every resize is ``A_h @ x @ A_w.T`` for two small
interpolation matrices.  The adjoint is the same product with transposes.
"""
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=256)
def _interp_matrix(n_in, n_out):
    a = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - frac)
    np.add.at(a, (rows, i1), frac)
    a.setflags(write=False)
    return a


def interp_matrix(n_in, n_out):
    """``(n_out, n_in)`` matrix of 1-D bilinear weights; rows sum to one."""
    return _interp_matrix(int(n_in), int(n_out))


def resize(x, out_h, out_w):
    """Resize the last two axes of ``x`` to ``(out_h, out_w)``."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ah = interp_matrix(h, out_h)
    aw = interp_matrix(w, out_w)
    out = np.einsum("ij,...jk,lk->...il", ah, x, aw, optimize=True)
    return out.astype(np.result_type(x.dtype, np.float32), copy=False)


def bilinear_upsample(x, factor=8):
    x = np.asarray(x)
    h, w = x.shape[-2:]
    return resize(x, factor * h, factor * w)


def bilinear_adjoint(g, factor=8):
    """Transpose of :func:`bilinear_upsample` applied to ``g``."""
    g = np.asarray(g)
    big_h, big_w = g.shape[-2:]
    if big_h % factor or big_w % factor:
        raise ValueError(f"shape {g.shape} is not a multiple of {factor}")
    ah = interp_matrix(big_h // factor, big_h)
    aw = interp_matrix(big_w // factor, big_w)
    out = np.einsum("ij,...il,lk->...jk", ah, g, aw, optimize=True)
    return out.astype(np.result_type(g.dtype, np.float32), copy=False)


def resize_nearest(x, out_h, out_w):
    x = np.asarray(x)
    h, w = x.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return x[..., rows[:, None], cols[None, :]]
