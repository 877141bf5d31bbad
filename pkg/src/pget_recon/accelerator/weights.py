"""Portable weight container for the learned update operators.

The on-disk format (".pgwt") is little-endian throughout: magic "PGWT",
version u32, architecture tag u8 (0 cnn, 1 fno, 2 wno), iteration index
u32, normalization bounds 2 x f64, tensor count u32, then per tensor a
u16 name length, the UTF-8 name, dtype u8 (0 float32, 1 complex64 stored
as interleaved re/im), ndim u8, u32 dims and the raw payload. Tensors are
written in the fixed per-architecture inventory order so save/load round
trips are byte identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import FormatError, InvalidInputError
from ..rng import STREAM_WEIGHTS, philox

MAGIC = b"PGWT"
VERSION = 1
ARCH_TAGS = {"cnn": 0, "fno": 1, "wno": 2}
TAG_ARCHS = {v: k for k, v in ARCH_TAGS.items()}
DTYPE_F32 = 0
DTYPE_C64 = 1

# architecture hyperparameters shared with the trainer
CNN_CHANNELS = (2, 6, 12, 24)
CNN_KERNEL = 5
FNO_LAYERS = 3
FNO_HIDDEN = 12
FNO_MODES = 20
FNO_RANKS = (14, 19)
FNO_LIFT = 8
WNO_LAYERS = 2
WNO_HIDDEN = 12
WNO_LEVELS = 3
WNO_KERNEL = 5


def _cnn_inventory():
    inv = []
    chans = CNN_CHANNELS
    k = CNN_KERNEL
    for branch in ("enc_u", "enc_s"):
        for i in range(3):
            inv.append((f"{branch}{i}.weight", (chans[i + 1], chans[i], k, k), DTYPE_F32))
            inv.append((f"{branch}{i}.bias", (chans[i + 1],), DTYPE_F32))
    dec = chans[::-1]
    for i in range(3):
        inv.append((f"dec{i}.weight", (dec[i + 1], dec[i], k, k), DTYPE_F32))
        inv.append((f"dec{i}.bias", (dec[i + 1],), DTYPE_F32))
    inv.append(("gate.weight", (2, 2, k, k), DTYPE_F32))
    return inv


def _fno_inventory():
    h = FNO_HIDDEN
    m2 = FNO_MODES * FNO_MODES
    r1, r2 = FNO_RANKS
    inv = [
        ("lift0.weight", (FNO_LIFT, 6), DTYPE_F32),
        ("lift0.bias", (FNO_LIFT,), DTYPE_F32),
        ("lift1.weight", (h, FNO_LIFT), DTYPE_F32),
        ("lift1.bias", (h,), DTYPE_F32),
    ]
    for i in range(FNO_LAYERS):
        inv.append((f"block{i}.channel.weight", (h, h), DTYPE_F32))
        inv.append((f"block{i}.channel.bias", (h,), DTYPE_F32))
        inv.append((f"block{i}.spec_u", (h * h, r1), DTYPE_C64))
        inv.append((f"block{i}.spec_core", (r1, r2), DTYPE_C64))
        inv.append((f"block{i}.spec_v", (r2, m2), DTYPE_C64))
        inv.append((f"block{i}.spatial_bias", (h,), DTYPE_F32))
    inv += [
        ("proj0.weight", (FNO_LIFT, h), DTYPE_F32),
        ("proj1.weight", (2, FNO_LIFT), DTYPE_F32),
        ("proj1.bias", (2,), DTYPE_F32),
        ("gate_conv.weight", (2, 2, 5, 5), DTYPE_F32),
        ("gate_skip.weight", (2, 2), DTYPE_F32),
    ]
    return inv


def _wno_inventory():
    h = WNO_HIDDEN
    k = WNO_KERNEL
    inv = [
        ("lift0.weight", (FNO_LIFT, 4), DTYPE_F32),
        ("lift1.weight", (h, FNO_LIFT), DTYPE_F32),
    ]
    for i in range(WNO_LAYERS):
        inv.append((f"block{i}.channel.weight", (h, h), DTYPE_F32))
        for band in ("a", "h", "v", "d"):
            inv.append((f"block{i}.sub_{band}.weight", (h, h, k, k), DTYPE_F32))
    inv += [
        ("proj0.weight", (FNO_LIFT, h), DTYPE_F32),
        ("proj1.weight", (2, FNO_LIFT), DTYPE_F32),
        ("proj1.bias", (2,), DTYPE_F32),
    ]
    return inv


INVENTORIES = {"cnn": _cnn_inventory(), "fno": _fno_inventory(), "wno": _wno_inventory()}


@dataclass
class WeightStore:
    """Ordered named tensors plus the metadata the engine needs to apply them."""

    arch: str
    iteration: int
    bounds: tuple[float, float]
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCH_TAGS:
            raise InvalidInputError(f"unknown architecture tag {self.arch!r}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def n_params(self) -> int:
        """Total element count; complex entries count once."""
        return sum(int(np.prod(t.shape)) for t in self.tensors.values())

    def validate(self) -> None:
        inv = INVENTORIES[self.arch]
        names = list(self.tensors)
        expected = [n for n, _, _ in inv]
        if names != expected:
            unknown = set(names) - set(expected)
            missing = set(expected) - set(names)
            raise FormatError(
                f"tensor inventory mismatch for {self.arch}: unknown={sorted(unknown)} "
                f"missing={sorted(missing)}"
            )
        for name, shape, dtype in inv:
            arr = self.tensors[name]
            if tuple(arr.shape) != tuple(shape):
                raise FormatError(f"{name}: dims {arr.shape} do not match {shape}")
            want = np.complex64 if dtype == DTYPE_C64 else np.float32
            if arr.dtype != want:
                raise FormatError(f"{name}: dtype {arr.dtype} does not match {np.dtype(want)}")

    def describe(self):
        return [(name, str(arr.dtype), tuple(arr.shape)) for name, arr in self.tensors.items()]

    def save(self, path) -> None:
        self.validate()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<B", ARCH_TAGS[self.arch]))
            fh.write(struct.pack("<I", self.iteration))
            fh.write(struct.pack("<dd", *self.bounds))
            fh.write(struct.pack("<I", len(self.tensors)))
            for name, arr in self.tensors.items():
                blob = name.encode("utf-8")
                fh.write(struct.pack("<H", len(blob)))
                fh.write(blob)
                if arr.dtype == np.complex64:
                    fh.write(struct.pack("<B", DTYPE_C64))
                    payload = np.ascontiguousarray(arr).view(np.float32)
                else:
                    fh.write(struct.pack("<B", DTYPE_F32))
                    payload = np.ascontiguousarray(arr)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(payload.astype("<f4", copy=False).tobytes())


def load_weights(path) -> WeightStore:
    """Read and validate a ".pgwt" file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError("bad magic: not a PGWT weight file")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise FormatError("truncated weight file")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    (tag,) = take("<B")
    if tag not in TAG_ARCHS:
        raise FormatError(f"unknown architecture tag {tag}")
    (iteration,) = take("<I")
    bounds = take("<dd")
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (dtype_tag,) = take("<B")
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I")
        n_el = int(np.prod(dims)) if dims else 1
        n_floats = n_el * (2 if dtype_tag == DTYPE_C64 else 1)
        if off + 4 * n_floats > len(data):
            raise FormatError("truncated tensor payload")
        raw = np.frombuffer(data, dtype="<f4", count=n_floats, offset=off)
        off += 4 * n_floats
        if dtype_tag == DTYPE_C64:
            arr = raw.view(np.complex64).reshape(dims).copy()
        elif dtype_tag == DTYPE_F32:
            arr = raw.reshape(dims).astype(np.float32)
        else:
            raise FormatError(f"unknown tensor dtype tag {dtype_tag}")
        tensors[name] = arr
    if off != len(data):
        raise FormatError("trailing bytes after the last tensor")
    store = WeightStore(arch=TAG_ARCHS[tag], iteration=iteration, bounds=tuple(bounds),
                        tensors=tensors)
    store.validate()
    return store


def init_weights(arch: str, seed: int, bounds, iteration: int = 0,
                 scale: float = 1.0) -> WeightStore:
    """Freshly initialized store: He-style fan-in scaling, zero biases."""
    if arch not in INVENTORIES:
        raise InvalidInputError(f"unknown architecture {arch!r}")
    rng = philox(seed, STREAM_WEIGHTS)
    tensors = {}
    for name, shape, dtype in INVENTORIES[arch]:
        if name.endswith(".bias") or name.endswith("spatial_bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
        std = scale * np.sqrt(2.0 / max(fan_in, 1))
        if dtype == DTYPE_C64:
            re = rng.normal(0.0, std, shape)
            im = rng.normal(0.0, std, shape)
            tensors[name] = (re + 1j * im).astype(np.complex64)
        else:
            tensors[name] = rng.normal(0.0, std, shape).astype(np.float32)
    return WeightStore(arch=arch, iteration=iteration, bounds=tuple(bounds), tensors=tensors)


def zero_weights(arch: str, bounds, iteration: int = 0) -> WeightStore:
    """All-zero store; the induced operator leaves the iterate unchanged."""
    tensors = {
        name: np.zeros(shape, dtype=np.complex64 if dt == DTYPE_C64 else np.float32)
        for name, shape, dt in INVENTORIES[arch]
    }
    return WeightStore(arch=arch, iteration=iteration, bounds=tuple(bounds), tensors=tensors)
