"""Encoder-decoder convolutional update operator.

Two stride-2 encoder branches (one for the iterate channels, one for the
step channels) grow 2 -> 6 -> 12 -> 24 channels with 5x5 kernels; their
latent codes are summed and decoded back with nearest-neighbor upsampling
to the mirrored sizes. A bias-free 5x5 convolution of the step acts as a
multiplicative gate on the decoder output, so a zero step cannot move the
iterate.
"""

from __future__ import annotations

import numpy as np

from .common import conv2d, nearest_resize, relu
from .weights import WeightStore


def cnn_forward(store: WeightStore, u_norm: np.ndarray, s_norm: np.ndarray):
    """Normalized-space forward pass; returns (u_tilde_norm, g, gate)."""
    x = u_norm.astype(np.float32)
    s = s_norm.astype(np.float32)

    def encode(branch, inp):
        sizes = [inp.shape[1:]]
        h = inp
        for i in range(3):
            h = relu(conv2d(h, store[f"{branch}{i}.weight"], store[f"{branch}{i}.bias"],
                            stride=2, padding=2))
            sizes.append(h.shape[1:])
        return h, sizes

    hu, sizes = encode("enc_u", x)
    hs, _ = encode("enc_s", s)
    h = hu + hs
    # decoder mirrors the encoder sizes; the last convolution stays linear
    for i in range(3):
        h = nearest_resize(h, sizes[2 - i])
        h = conv2d(h, store[f"dec{i}.weight"], store[f"dec{i}.bias"], stride=1, padding=2)
        if i < 2:
            h = relu(h)
    g = h
    gate = conv2d(s, store["gate.weight"], None, stride=1, padding=2)
    u_tilde = relu(x + gate * g)
    return u_tilde, g, gate


def cnn_gate(store: WeightStore, s_norm: np.ndarray) -> np.ndarray:
    """The linear gate L(s) alone, for structural tests."""
    return conv2d(s_norm.astype(np.float32), store["gate.weight"], None, stride=1, padding=2)
