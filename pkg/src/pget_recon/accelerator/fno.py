"""Spectral-convolution update operator.

Each layer mixes channels pointwise and convolves globally by multiplying
a learned low-rank weight against the lowest 20x20 Fourier bands (both
frequency signs per axis). The spectral weights are stored as a rank
(14, 19) three-factor decomposition and materialized once per store. The
gate is a local operator on the step: a bias-free 5x5 convolution plus a
linear skip.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from .common import channel_linear, conv2d, coordinate_channels, gelu
from .weights import FNO_HIDDEN, FNO_LAYERS, FNO_MODES, WeightStore

_SPEC_CACHE: dict = {}


def materialize_spectral(store: WeightStore, layer: int) -> np.ndarray:
    """Low-rank factors -> dense [C_out, C_in, modes, modes] complex weights."""
    key = (id(store), layer)
    hit = _SPEC_CACHE.get(key)
    if hit is not None:
        return hit
    u = store[f"block{layer}.spec_u"].astype(np.complex64)
    core = store[f"block{layer}.spec_core"].astype(np.complex64)
    v = store[f"block{layer}.spec_v"].astype(np.complex64)
    h = FNO_HIDDEN
    dense = (u @ core @ v).reshape(h, h, FNO_MODES, FNO_MODES)
    if len(_SPEC_CACHE) > 64:
        _SPEC_CACHE.clear()
    _SPEC_CACHE[key] = dense
    return dense


def mode_indices(n: int, modes: int = FNO_MODES) -> np.ndarray:
    """Indices of the `modes` lowest frequencies on a length-n FFT axis."""
    if n < modes:
        raise InvalidInputError(f"grid size {n} cannot retain {modes} Fourier modes")
    half = modes // 2
    return np.concatenate([np.arange(half + modes % 2), np.arange(n - half, n)])


def spectral_coefficients(v: np.ndarray, modes: int = FNO_MODES) -> np.ndarray:
    """Retained Fourier coefficients of a [C, n, n] field."""
    n = v.shape[-1]
    idx = mode_indices(n, modes)
    vf = np.fft.fft2(v.astype(np.complex64))
    return vf[:, idx[:, None], idx[None, :]]


def fno_layer(v: np.ndarray, spectral: np.ndarray, channel_w: np.ndarray,
              channel_b: np.ndarray | None = None,
              spatial_bias: np.ndarray | None = None,
              activation: bool = True) -> np.ndarray:
    """GELU(channel mixing + inverse transform of the weighted retained modes)."""
    c, n, _ = v.shape
    idx = mode_indices(n, spectral.shape[-1])
    vf = np.fft.fft2(v.astype(np.complex64))
    coeff = vf[:, idx[:, None], idx[None, :]]
    out_coeff = np.einsum("oikl,ikl->okl", spectral, coeff, optimize=True)
    out_f = np.zeros((spectral.shape[0], n, n), dtype=np.complex64)
    out_f[:, idx[:, None], idx[None, :]] = out_coeff
    spatial = np.fft.ifft2(out_f).real.astype(np.float32)
    out = channel_linear(v, channel_w, channel_b) + spatial
    if spatial_bias is not None:
        out = out + spatial_bias[:, None, None]
    return gelu(out) if activation else out


def fno_forward(store: WeightStore, u_norm: np.ndarray, s_norm: np.ndarray):
    """Normalized-space forward pass; returns (u_tilde_norm, g, gate)."""
    x = u_norm.astype(np.float32)
    s = s_norm.astype(np.float32)
    n = x.shape[-1]
    a = np.concatenate([x, s, coordinate_channels(n)], axis=0)
    v = gelu(channel_linear(a, store["lift0.weight"], store["lift0.bias"]))
    v = channel_linear(v, store["lift1.weight"], store["lift1.bias"])
    for i in range(FNO_LAYERS):
        v = fno_layer(
            v,
            materialize_spectral(store, i),
            store[f"block{i}.channel.weight"],
            store[f"block{i}.channel.bias"],
            store[f"block{i}.spatial_bias"],
        )
    v = gelu(channel_linear(v, store["proj0.weight"]))
    g = channel_linear(v, store["proj1.weight"], store["proj1.bias"])
    gate = fno_gate(store, s)
    u_tilde = np.maximum(x + gate * g, 0.0)
    return u_tilde, g, gate


def fno_gate(store: WeightStore, s_norm: np.ndarray) -> np.ndarray:
    """Local linear gate: bias-free 5x5 convolution plus a channel skip."""
    s = s_norm.astype(np.float32)
    return conv2d(s, store["gate_conv.weight"], None, stride=1, padding=2) + channel_linear(
        s, store["gate_skip.weight"]
    )
