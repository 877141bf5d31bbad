"""Deterministic random-number streams.

All randomness in the engine flows through Philox4x64-10, a counter-based
generator whose output is identical across platforms and numpy builds.
Streams are identified by a 64-bit seed plus a small stream tag so that
independent consumers (noise, assembly sampling, augmentation, ...) never
share a stream even when they share a seed.
"""

from __future__ import annotations

import numpy as np

# fixed stream tags; values are arbitrary but frozen for dataset portability
STREAM_NOISE = 0x6E6F6973
STREAM_ASSEMBLY = 0x61736D62
STREAM_ROTATION = 0x726F7461
STREAM_SPLIT = 0x73706C74
STREAM_WEIGHTS = 0x77676874


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a Generator on an independent Philox4x64 stream."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream & 0xFFFFFFFFFFFFFFFF)])
    return np.random.Generator(np.random.Philox(key=key))


def sample_seed(master_seed: int, index: int) -> int:
    """Derive a per-sample seed from a master seed, stable across runs."""
    rng = philox(master_seed, stream=index)
    return int(rng.integers(0, 2**63 - 1, dtype=np.int64))
