"""Wavelet-domain update operator.

Each layer transforms the field with a 3-level Daubechies-3 analysis,
applies an independent 5x5 channel-mixing convolution to the coarsest
approximation and to each of the three directional detail subbands,
reconstructs with the finer details zeroed, and adds a pointwise channel
mixing. The gate is the identity, so the update is u + s * g.
"""

from __future__ import annotations

import numpy as np

from .common import channel_linear, conv2d, gelu
from .wavelet import Wavedec2, dwt2, idwt2
from .weights import WNO_LAYERS, WNO_LEVELS, WeightStore

_BANDS = ("a", "h", "v", "d")


def wno_layer(v: np.ndarray, kernels: dict, channel_w: np.ndarray,
              activation: bool = True, mode: str = "symmetric") -> np.ndarray:
    """GELU(channel mixing + coarse-band wavelet convolution path)."""
    coeffs = dwt2(v, WNO_LEVELS, mode)
    approx = conv2d(coeffs.approx, kernels["a"], None, stride=1, padding=2)
    h, vv, d = coeffs.details[0]
    new_coarse = (
        conv2d(h, kernels["h"], None, stride=1, padding=2),
        conv2d(vv, kernels["v"], None, stride=1, padding=2),
        conv2d(d, kernels["d"], None, stride=1, padding=2),
    )
    details = [new_coarse] + [
        tuple(np.zeros_like(band) for band in lvl) for lvl in coeffs.details[1:]
    ]
    rebuilt = Wavedec2(approx=approx, details=details, shapes=coeffs.shapes, mode=mode)
    out = channel_linear(v, channel_w) + idwt2(rebuilt).astype(v.dtype)
    return gelu(out) if activation else out


def wno_forward(store: WeightStore, u_norm: np.ndarray, s_norm: np.ndarray):
    """Normalized-space forward pass; returns (u_tilde_norm, g, gate)."""
    x = u_norm.astype(np.float32)
    s = s_norm.astype(np.float32)
    a = np.concatenate([x, s], axis=0)
    v = gelu(channel_linear(a, store["lift0.weight"]))
    v = channel_linear(v, store["lift1.weight"])
    for i in range(WNO_LAYERS):
        kernels = {band: store[f"block{i}.sub_{band}.weight"] for band in _BANDS}
        v = wno_layer(v, kernels, store[f"block{i}.channel.weight"])
    v = gelu(channel_linear(v, store["proj0.weight"]))
    g = channel_linear(v, store["proj1.weight"], store["proj1.bias"])
    gate = s  # identity gate
    u_tilde = np.maximum(x + gate * g, 0.0)
    return u_tilde, g, gate
