"""Shared single-precision building blocks for the learned operators.

All primitives mirror the reference training framework's conventions
(cross-correlation convolutions, floor-based nearest resize, erf-based
GELU) so weights exported from the trainer reproduce bit-comparable
outputs here.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import InvalidInputError


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation over a [C_in, H, W] input.

    weight is [C_out, C_in, kh, kw]; output spatial size follows
    floor((n + 2 padding - k) / stride) + 1.
    """
    c_in, h, w_dim = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise InvalidInputError(f"conv2d channel mismatch: {c_in} vs {c_in_w}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))
    if stride > 1:
        windows = windows[:, ::stride, ::stride]
    out = np.einsum("ihwkl,oikl->ohw", windows, weight, optimize=True)
    if bias is not None:
        out = out + bias[:, None, None]
    return out.astype(x.dtype, copy=False)


def nearest_resize(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of [C, H, W] using floor index mapping."""
    c, h, w = x.shape
    ho, wo = size
    rows = (np.arange(ho) * h) // ho
    cols = (np.arange(wo) * w) // wo
    return x[:, rows[:, None], cols[None, :]]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf) GELU."""
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0).astype(x.dtype)))).astype(x.dtype, copy=False)


def channel_linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Pointwise channel mixing: weight [C_out, C_in] applied at every pixel."""
    out = np.einsum("oi,ihw->ohw", weight, x, optimize=True)
    if bias is not None:
        out = out + bias[:, None, None]
    return out.astype(x.dtype, copy=False)


def coordinate_channels(n: int, dtype=np.float32) -> np.ndarray:
    """Two channels holding the normalized x and y pixel coordinates in [-1, 1]."""
    line = np.linspace(-1.0, 1.0, n, dtype=dtype)
    gx = np.broadcast_to(line[None, :], (n, n))
    gy = np.broadcast_to(line[:, None], (n, n))
    return np.stack([gx, gy]).astype(dtype)


def normalize_input(pair_stack: np.ndarray, step_stack: np.ndarray, bounds,
                    mask: np.ndarray | None = None) -> np.ndarray:
    """Four normalized f32 channels: emission, attenuation and their steps."""
    lam_max, mu_max = bounds
    sl = lam_max if lam_max > 0 else 1.0
    sm = mu_max if mu_max > 0 else 1.0
    chans = np.stack([
        pair_stack[0] / sl,
        pair_stack[1] / sm,
        step_stack[0] / sl,
        step_stack[1] / sm,
    ])
    if mask is not None:
        chans[:, ~mask] = 0.0
    return chans


def denormalize_output(out_norm: np.ndarray, bounds, mask: np.ndarray | None = None) -> np.ndarray:
    """Scale a 2-channel normalized output back to physical units and mask it."""
    lam_max, mu_max = bounds
    sl = lam_max if lam_max > 0 else 1.0
    sm = mu_max if mu_max > 0 else 1.0
    out = np.stack([
        out_norm[0].astype(np.float64) * sl,
        out_norm[1].astype(np.float64) * sm,
    ])
    if mask is not None:
        out[:, ~mask] = 0.0
    return out
