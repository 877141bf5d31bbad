"""Binary artifact formats and the dataset manifest.

All binary files are little-endian with a four-byte magic and a u32
version so future layouts can evolve without ambiguity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..forward import ImagePair, Sinogram

SINO_MAGIC = b"PGSN"
IMG_MAGIC = b"PGIP"
BATCH_MAGIC = b"PGTB"
VERSION = 1


def write_sinogram(path, sino: Sinogram) -> None:
    with open(path, "wb") as fh:
        fh.write(SINO_MAGIC)
        fh.write(struct.pack("<IIIQ", VERSION, sino.n_offsets, sino.n_angles,
                             sino.table_hash & 0xFFFFFFFFFFFFFFFF))
        fh.write(np.ascontiguousarray(sino.y, dtype="<f8").tobytes())


def read_sinogram(path) -> Sinogram:
    data = Path(path).read_bytes()
    if data[:4] != SINO_MAGIC:
        raise FormatError(f"{path}: bad magic, expected sinogram file")
    version, n_off, n_ang, table_hash = struct.unpack_from("<IIIQ", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported sinogram version {version}")
    need = n_off * n_ang
    payload = np.frombuffer(data, dtype="<f8", count=need, offset=24)
    if payload.size != need or len(data) != 24 + 8 * need:
        raise FormatError(f"{path}: truncated sinogram payload")
    return Sinogram(payload.reshape(n_off, n_ang).copy(), int(table_hash))


def write_imgpair(path, pair: ImagePair) -> None:
    n = pair.n_px
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<II", VERSION, n))
        fh.write(np.ascontiguousarray(pair.emission, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(pair.attenuation, dtype="<f8").tobytes())


def read_imgpair(path, bounds=(0.0, 0.0)) -> ImagePair:
    data = Path(path).read_bytes()
    if data[:4] != IMG_MAGIC:
        raise FormatError(f"{path}: bad magic, expected image pair file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported image pair version {version}")
    need = n * n
    if len(data) != 12 + 16 * need:
        raise FormatError(f"{path}: truncated image pair payload")
    lam = np.frombuffer(data, dtype="<f8", count=need, offset=12).reshape(n, n).copy()
    mu = np.frombuffer(data, dtype="<f8", count=need, offset=12 + 8 * need).reshape(n, n).copy()
    return ImagePair(lam, mu, tuple(bounds))


# ---------------------------------------------------------------------------
# Training batches: (iterate, step, ground truth) triples at one iteration
# ---------------------------------------------------------------------------

def write_batch(path, k: int, n_px: int, cfg_hash: int, augmented: bool, bounds,
                samples) -> None:
    """samples: iterable of (sample_id, u_stack, s_stack, gt_stack)."""
    samples = list(samples)
    with open(path, "wb") as fh:
        fh.write(BATCH_MAGIC)
        fh.write(struct.pack("<IIIIQB", VERSION, k, len(samples), n_px,
                             cfg_hash & 0xFFFFFFFFFFFFFFFF, int(augmented)))
        fh.write(struct.pack("<dd", *bounds))
        for sid, u, s, gt in samples:
            fh.write(struct.pack("<I", sid))
            for plane in (u[0], u[1], s[0], s[1], gt[0], gt[1]):
                fh.write(np.ascontiguousarray(plane, dtype="<f8").tobytes())


@dataclass
class TrainingBatch:
    k: int
    n_px: int
    cfg_hash: int
    augmented: bool
    bounds: tuple[float, float]
    sample_ids: np.ndarray
    u: np.ndarray  # [N, 2, n, n]
    s: np.ndarray
    gt: np.ndarray


def read_batch(path) -> TrainingBatch:
    data = Path(path).read_bytes()
    if data[:4] != BATCH_MAGIC:
        raise FormatError(f"{path}: bad magic, expected training batch file")
    version, k, count, n_px, cfg_hash, aug = struct.unpack_from("<IIIIQB", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported batch version {version}")
    off = 4 + struct.calcsize("<IIIIQB")
    bounds = struct.unpack_from("<dd", data, off)
    off += 16
    plane = n_px * n_px
    ids = np.empty(count, dtype=np.int64)
    u = np.empty((count, 2, n_px, n_px))
    s = np.empty_like(u)
    gt = np.empty_like(u)
    for i in range(count):
        (ids[i],) = struct.unpack_from("<I", data, off)
        off += 4
        arrs = np.frombuffer(data, dtype="<f8", count=6 * plane, offset=off).reshape(6, n_px, n_px)
        off += 48 * plane
        u[i] = arrs[0:2]
        s[i] = arrs[2:4]
        gt[i] = arrs[4:6]
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes after the last sample")
    return TrainingBatch(k=k, n_px=n_px, cfg_hash=int(cfg_hash), augmented=bool(aug),
                         bounds=tuple(bounds), sample_ids=ids, u=u, s=s, gt=gt)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    sample_id: int
    tier: str
    branch: str
    split: str
    seed: int
    image: str
    sinogram: str


@dataclass
class Manifest:
    meta: dict
    entries: list[ManifestEntry] = field(default_factory=list)

    def split_entries(self, split: str):
        return [e for e in self.entries if e.split == split]


def write_manifest(path, meta: dict, entries) -> None:
    lines = ["# pget dataset manifest v1"]
    for key in sorted(meta):
        lines.append(f"# {key} {meta[key]}")
    lines.append("# columns: id tier branch split seed image sinogram")
    for e in entries:
        lines.append(f"{e.sample_id} {e.tier} {e.branch} {e.split} {e.seed} {e.image} {e.sinogram}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    meta = {}
    entries = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if " " in body and not body.startswith(("pget", "columns")):
                key, value = body.split(" ", 1)
                meta[key] = value
            continue
        parts = line.split()
        if len(parts) != 7:
            raise FormatError(f"{path}: malformed manifest row {line!r}")
        entries.append(
            ManifestEntry(
                sample_id=int(parts[0]), tier=parts[1], branch=parts[2], split=parts[3],
                seed=int(parts[4]), image=parts[5], sinogram=parts[6],
            )
        )
    return Manifest(meta=meta, entries=entries)
