"""Masked relative-error metrics for reconstructed image pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError

__all__ = ["Metrics", "compute_metrics"]


@dataclass
class Metrics:
    rel_err_lambda: float
    rel_err_mu: float


def _as_stack(u):
    if hasattr(u, "stack"):
        return u.stack()
    return np.asarray(u, dtype=float)


def compute_metrics(u, u_truth, mask) -> Metrics:
    """Relative masked L2 errors per channel: ||(u - t) * mask|| / ||t * mask||."""
    a = _as_stack(u)
    b = _as_stack(u_truth)
    if a.shape != b.shape:
        raise InvalidInputError("shape mismatch between iterate and ground truth")
    mask = np.asarray(mask, dtype=bool)
    out = []
    for ch in range(2):
        num = np.linalg.norm(a[ch][mask] - b[ch][mask])
        den = np.linalg.norm(b[ch][mask])
        if den == 0.0:
            raise InvalidInputError("ground-truth channel has zero norm inside the mask")
        out.append(float(num / den))
    return Metrics(rel_err_lambda=out[0], rel_err_mu=out[1])
