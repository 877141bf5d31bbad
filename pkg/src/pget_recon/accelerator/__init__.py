"""Learned update operators: weight container, normalization and inference.

Every operator has the same contract: it receives the current iterate and
the deterministic step, both normalized by the physical bounds, and
returns ReLU(u + L(s) * g(u, s)) rescaled to physical units and masked to
the reconstruction disk. The gate L is linear and bias free, so a zero
step can never move the iterate.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from ..forward import ImagePair
from ..geometry import GridSpec, disk_mask
from .cnn import cnn_forward, cnn_gate
from .common import denormalize_output, normalize_input
from .fno import fno_forward, fno_gate, fno_layer, materialize_spectral, spectral_coefficients
from .weights import (
    INVENTORIES,
    WeightStore,
    init_weights,
    load_weights,
    zero_weights,
)
from .wavelet import Wavedec2, dwt2, idwt2
from .wno import wno_forward, wno_layer

__all__ = [
    "WeightStore",
    "load_weights",
    "init_weights",
    "zero_weights",
    "INVENTORIES",
    "normalize",
    "denormalize",
    "apply_accelerator",
    "apply_with_parts",
    "gate_response",
    "fno_layer",
    "materialize_spectral",
    "spectral_coefficients",
    "wno_layer",
    "dwt2",
    "idwt2",
    "Wavedec2",
]

_FORWARDS = {"cnn": cnn_forward, "fno": fno_forward, "wno": wno_forward}


def normalize(pair: ImagePair, step: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Bounds-normalized 4-channel f32 input (emission, attenuation, both steps)."""
    return normalize_input(pair.stack(), np.asarray(step, dtype=float), pair.bounds, mask)


def denormalize(out_norm: np.ndarray, bounds, mask: np.ndarray) -> ImagePair:
    """Physical-unit image pair, masked to zero outside the disk."""
    stack = denormalize_output(out_norm, bounds, mask)
    return ImagePair(stack[0], stack[1], tuple(bounds))


def apply_with_parts(store: WeightStore, pair: ImagePair, step: np.ndarray):
    """Run the operator and expose its internals (g and the applied gate L(s))."""
    n = pair.n_px
    mask = disk_mask(GridSpec(n_px=n, pixel_size=1.0))
    chans = normalize_input(pair.stack(), np.asarray(step, dtype=float), store.bounds, mask)
    forward = _FORWARDS.get(store.arch)
    if forward is None:
        raise InvalidInputError(f"no forward pass for architecture {store.arch!r}")
    u_tilde_norm, g, gate = forward(store, chans[:2], chans[2:])
    return denormalize(u_tilde_norm, store.bounds, mask), g, gate


def apply_accelerator(store: WeightStore, pair: ImagePair, step: np.ndarray) -> ImagePair:
    """Refined iterate proposed by the learned operator."""
    out, _, _ = apply_with_parts(store, pair, step)
    return out


def gate_response(store: WeightStore, step_norm: np.ndarray) -> np.ndarray:
    """The linear gate L applied to a normalized step (for linearity checks)."""
    if store.arch == "cnn":
        return cnn_gate(store, step_norm)
    if store.arch == "fno":
        return fno_gate(store, step_norm)
    if store.arch == "wno":
        return np.asarray(step_norm, dtype=np.float32)
    raise InvalidInputError(f"no gate for architecture {store.arch!r}")
