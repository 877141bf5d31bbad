"""Grayscale rendering of image pairs as binary portable graymaps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..forward import ImagePair


def _to_pgm(img: np.ndarray, upper: float) -> bytes:
    scale = upper if upper > 0 else 1.0
    levels = np.clip(np.rint(img / scale * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    return header + levels.tobytes()


def render(pair: ImagePair, out_prefix) -> tuple[Path, Path]:
    """Write emission and attenuation as 8-bit PGM with fixed bound scaling."""
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    lam_path = prefix.with_name(prefix.name + "_emission.pgm")
    mu_path = prefix.with_name(prefix.name + "_attenuation.pgm")
    lam_path.write_bytes(_to_pgm(pair.emission, pair.bounds[0]))
    mu_path.write_bytes(_to_pgm(pair.attenuation, pair.bounds[1]))
    return lam_path, mu_path
