"""Separable 2-D Daubechies-3 wavelet transform.

Symmetric (whole-point reflected) boundary extension is the default and
reconstructs exactly thanks to the redundant boundary coefficients; the
periodic mode is the orthogonal variant used for energy checks and
requires even lengths at every level. Filters are hardcoded; a test
re-derives them from the Daubechies construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidInputError

# db3 scaling (synthesis lowpass) coefficients
DB3_REC_LO = np.array(
    [
        0.33267055295095688,
        0.80689150931333875,
        0.45987750211933132,
        -0.13501102001039084,
        -0.08544127388224149,
        0.03522629188210562,
    ]
)
_L = len(DB3_REC_LO)

DB3_DEC_LO = DB3_REC_LO[::-1].copy()
DB3_REC_HI = np.array([(-1.0) ** k * DB3_REC_LO[_L - 1 - k] for k in range(_L)])
DB3_DEC_HI = DB3_REC_HI[::-1].copy()


def _extend(x: np.ndarray, width: int) -> np.ndarray:
    """Symmetric (edge-repeating) extension along the last axis."""
    left = x[..., :width][..., ::-1]
    right = x[..., -width:][..., ::-1]
    return np.concatenate([left, x, right], axis=-1)


def _conv_down(x: np.ndarray, filt: np.ndarray) -> np.ndarray:
    """Valid convolution with the filter followed by dyadic downsampling."""
    windows = sliding_window_view(x, _L, axis=-1)
    out = windows @ filt[::-1].astype(x.dtype)
    return out[..., 1::2]


def dwt1d(x: np.ndarray, mode: str = "symmetric"):
    """Single-level analysis along the last axis; returns (approx, detail)."""
    n = x.shape[-1]
    if mode == "symmetric":
        xe = _extend(x, _L - 1)
        return _conv_down(xe, DB3_DEC_LO), _conv_down(xe, DB3_DEC_HI)
    if mode == "periodic":
        if n % 2:
            raise InvalidInputError("periodic mode needs an even length")
        idx = (np.arange(n // 2)[:, None] * 2 + 1 - np.arange(_L)[None, :]) % n
        gathered = x[..., idx]
        return gathered @ DB3_DEC_LO.astype(x.dtype), gathered @ DB3_DEC_HI.astype(x.dtype)
    raise InvalidInputError(f"unknown boundary mode {mode!r}")


def idwt1d(approx: np.ndarray, detail: np.ndarray, length: int, mode: str = "symmetric"):
    """Single-level synthesis along the last axis back to ``length`` samples."""
    if mode == "symmetric":
        m = approx.shape[-1]
        up_shape = approx.shape[:-1] + (2 * m,)
        up_a = np.zeros(up_shape, dtype=approx.dtype)
        up_d = np.zeros(up_shape, dtype=approx.dtype)
        up_a[..., ::2] = approx
        up_d[..., ::2] = detail
        full = _fullconv(up_a, DB3_REC_LO) + _fullconv(up_d, DB3_REC_HI)
        start = _L - 2
        return full[..., start : start + length]
    if mode == "periodic":
        n = length
        m = approx.shape[-1]
        idx = (np.arange(m)[:, None] * 2 + 1 - np.arange(_L)[None, :]) % n
        out = np.zeros(approx.shape[:-1] + (n,), dtype=approx.dtype)
        flat_idx = idx.ravel()
        contrib_a = (approx[..., :, None] * DB3_DEC_LO.astype(approx.dtype)).reshape(
            approx.shape[:-1] + (m * _L,)
        )
        contrib_d = (detail[..., :, None] * DB3_DEC_HI.astype(approx.dtype)).reshape(
            approx.shape[:-1] + (m * _L,)
        )
        np.add.at(out, (..., flat_idx), contrib_a + contrib_d)
        return out
    raise InvalidInputError(f"unknown boundary mode {mode!r}")


def _fullconv(x: np.ndarray, filt: np.ndarray) -> np.ndarray:
    pad = _L - 1
    xe = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    windows = sliding_window_view(xe, _L, axis=-1)
    return windows @ filt[::-1].astype(x.dtype)


def _dwt2_single(v: np.ndarray, mode: str):
    lo, hi = dwt1d(v, mode)  # along the last axis (columns)
    lo = np.swapaxes(lo, -1, -2)
    hi = np.swapaxes(hi, -1, -2)
    ll, lh = dwt1d(lo, mode)
    hl, hh = dwt1d(hi, mode)
    swap = lambda a: np.swapaxes(a, -1, -2)
    # a: low/low, h: column detail, v: row detail, d: diagonal
    return swap(ll), (swap(hl), swap(lh), swap(hh))


def _idwt2_single(a, hvd, shape, mode):
    h, v, d = hvd
    swap = lambda arr: np.swapaxes(arr, -1, -2)
    lo = idwt1d(swap(a), swap(v), shape[-2], mode)
    hi = idwt1d(swap(h), swap(d), shape[-2], mode)
    return idwt1d(swap(lo), swap(hi), shape[-1], mode)


@dataclass
class Wavedec2:
    """Multi-level 2-D decomposition: coarsest approximation plus details per level."""

    approx: np.ndarray
    details: list  # [(h, v, d)] coarsest first
    shapes: list  # input shape per level, coarsest first
    mode: str

    def zeroed_details_like(self):
        return [tuple(np.zeros_like(band) for band in lvl) for lvl in self.details]


def dwt2(v: np.ndarray, levels: int = 3, mode: str = "symmetric") -> Wavedec2:
    """Multi-level separable analysis of the trailing two axes."""
    if levels < 1:
        raise InvalidInputError("levels must be >= 1")
    approx = np.asarray(v)
    details = []
    shapes = []
    for _ in range(levels):
        shapes.append(approx.shape[-2:])
        approx, hvd = _dwt2_single(approx, mode)
        details.append(hvd)
    return Wavedec2(approx=approx, details=details[::-1], shapes=shapes[::-1], mode=mode)


def idwt2(coeffs: Wavedec2) -> np.ndarray:
    """Inverse of :func:`dwt2`."""
    approx = coeffs.approx
    for hvd, shape in zip(coeffs.details, coeffs.shapes):
        approx = _idwt2_single(approx, hvd, shape, coeffs.mode)
    return approx
