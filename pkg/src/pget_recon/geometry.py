"""Pixel grid, detector ring and precomputed ray tables.

Conventions
-----------
* Image arrays are indexed ``img[row, col]``. Physical coordinates place
  ``x`` along columns and ``y`` along rows, both in mm, with the origin at
  the central pixel of the (odd-sized) grid.
* All tables are built for the reference projection direction ``+x``.
  Projections at other angles rotate the image content into this frame.
* A detector element at offset ``s`` accepts photons travelling in ``+x``
  whose ray axis passes within half a collimator width of ``y = s``.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError

__all__ = [
    "GridSpec",
    "DetectorSpec",
    "RayTables",
    "build_grid",
    "default_detector",
    "disk_mask",
    "build_ray_tables",
    "rotate_image",
    "rotate_adjoint",
    "rotation_operator",
    "trace_rays",
    "chord_length",
]


@dataclass(frozen=True)
class GridSpec:
    """Square pixel grid covering the circular reconstruction domain."""

    n_px: int = 165
    pixel_size: float = 1.0

    @property
    def r_domain(self) -> float:
        """Radius of the reconstruction disk in mm."""
        return self.n_px * self.pixel_size / 2.0

    @property
    def n_pixels(self) -> int:
        return self.n_px * self.n_px

    def centers(self) -> np.ndarray:
        """Pixel-center coordinates along one axis, in mm."""
        half = (self.n_px - 1) / 2.0
        return (np.arange(self.n_px) - half) * self.pixel_size

    def key(self) -> tuple:
        return (self.n_px, float(self.pixel_size))


@dataclass(frozen=True)
class DetectorSpec:
    """Effective detector sampling: offsets across the field of view and view angles."""

    n_offsets: int
    offset_pitch: float = 2.0
    n_angles: int = 120
    collimator_width: float = 4.0

    def __post_init__(self):
        if self.n_offsets < 1:
            raise InvalidInputError("n_offsets must be >= 1")
        if self.offset_pitch <= 0:
            raise InvalidInputError("offset_pitch must be positive")
        if self.n_angles < 1:
            raise InvalidInputError("n_angles must be >= 1")
        if self.collimator_width <= 0:
            raise InvalidInputError("collimator_width must be positive")

    def offsets(self) -> np.ndarray:
        """Offset coordinates s_n in mm, centered on the rotation axis."""
        half = (self.n_offsets - 1) / 2.0
        return (np.arange(self.n_offsets) - half) * self.offset_pitch

    def angles(self) -> np.ndarray:
        """Projection angles in radians, uniform over [0, 2pi), strictly increasing."""
        return np.arange(self.n_angles) * (2.0 * math.pi / self.n_angles)

    def key(self) -> tuple:
        return (
            self.n_offsets,
            float(self.offset_pitch),
            self.n_angles,
            float(self.collimator_width),
        )


def build_grid(n_px: int, pixel_size: float) -> GridSpec:
    """Validate and build a grid. n_px must be odd so a center pixel exists."""
    if n_px < 3:
        raise InvalidInputError(f"n_px must be >= 3, got {n_px}")
    if n_px % 2 == 0:
        raise InvalidInputError(f"even grid: n_px={n_px}, a center pixel is required")
    if pixel_size <= 0:
        raise InvalidInputError(f"pixel_size must be positive, got {pixel_size}")
    return GridSpec(n_px=int(n_px), pixel_size=float(pixel_size))


def default_detector(
    grid: GridSpec,
    offset_pitch: float = 2.0,
    n_angles: int = 120,
    collimator_width: float = 4.0,
) -> DetectorSpec:
    """Detector that spans the grid diagonal at the given pitch, odd element count."""
    span = grid.n_px * grid.pixel_size * math.sqrt(2.0)
    n_offsets = int(math.ceil(span / offset_pitch))
    if n_offsets % 2 == 0:
        n_offsets += 1
    return DetectorSpec(
        n_offsets=n_offsets,
        offset_pitch=offset_pitch,
        n_angles=n_angles,
        collimator_width=collimator_width,
    )


def disk_mask(grid: GridSpec) -> np.ndarray:
    """Boolean mask of pixels whose centers lie strictly inside the disk.

    A pixel belongs to the disk when its center is at least half a pixel
    away from the boundary, so masked content survives rotation without
    leaking outside the domain.
    """
    x = grid.centers()
    rr = x[None, :] ** 2 + x[:, None] ** 2
    limit = grid.r_domain - grid.pixel_size / 2.0
    return rr <= limit * limit


def chord_length(grid: GridSpec, origin_xy: np.ndarray, direction_xy: np.ndarray) -> np.ndarray:
    """Distance from a point inside the disk to the disk boundary along a direction."""
    o = np.atleast_2d(np.asarray(origin_xy, dtype=float))
    d = np.asarray(direction_xy, dtype=float)
    d = d / np.linalg.norm(d)
    od = o @ d
    disc = od**2 - (np.einsum("ij,ij->i", o, o) - grid.r_domain**2)
    if np.any(disc < 0):
        raise InvalidInputError("ray origin outside the reconstruction disk")
    return -od + np.sqrt(disc)


# ---------------------------------------------------------------------------
# Ray traversal
# ---------------------------------------------------------------------------

def trace_rays(grid: GridSpec, origins: np.ndarray, direction: np.ndarray, t_end: np.ndarray):
    """March rays through the pixel grid and record per-pixel path lengths.

    Incremental traversal: every ray keeps the parameter of its next
    horizontal and vertical pixel-boundary crossing and advances one cell
    at a time until it reaches ``t_end``.

    Parameters
    ----------
    origins : (R, 2) array of (x, y) starting points in mm.
    direction : (2,) common unit direction.
    t_end : (R,) stopping distance along the ray for each origin.

    Returns
    -------
    ray_idx, cell_flat, lengths : 1-D arrays, one entry per crossed pixel.
    """
    n = grid.n_px
    px = grid.pixel_size
    half = (n - 1) / 2.0
    o = np.asarray(origins, dtype=float).reshape(-1, 2)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    t_end = np.asarray(t_end, dtype=float)
    n_rays = o.shape[0]

    # current cell indices (col tracks x, row tracks y)
    col = np.floor(o[:, 0] / px + half + 0.5).astype(np.int64)
    row = np.floor(o[:, 1] / px + half + 0.5).astype(np.int64)
    col = np.clip(col, 0, n - 1)
    row = np.clip(row, 0, n - 1)

    def boundary_t(coord, idx, dcomp):
        # distance to the next cell boundary along one axis
        if dcomp > 0:
            edge = (idx - half + 0.5) * px
            return (edge - coord) / dcomp
        if dcomp < 0:
            edge = (idx - half - 0.5) * px
            return (edge - coord) / dcomp
        return np.full(coord.shape, np.inf)

    tx = boundary_t(o[:, 0], col, d[0])
    ty = boundary_t(o[:, 1], row, d[1])
    t_cur = np.zeros(n_rays)
    alive = t_cur < t_end

    step_col = 1 if d[0] > 0 else -1
    step_row = 1 if d[1] > 0 else -1
    dtx = px / abs(d[0]) if d[0] != 0 else np.inf
    dty = px / abs(d[1]) if d[1] != 0 else np.inf

    out_ray, out_cell, out_len = [], [], []
    max_steps = 4 * n + 8
    for _ in range(max_steps):
        if not alive.any():
            break
        t_next = np.minimum(np.minimum(tx, ty), t_end)
        seg = t_next - t_cur
        idx = np.nonzero(alive & (seg > 0))[0]
        if idx.size:
            out_ray.append(idx.copy())
            out_cell.append(row[idx] * n + col[idx])
            out_len.append(seg[idx])
        finished = t_next >= t_end - 1e-15
        take_x = (tx <= ty) & ~finished & alive
        take_y = (ty < tx) & ~finished & alive
        col[take_x] += step_col
        tx[take_x] += dtx
        row[take_y] += step_row
        ty[take_y] += dty
        t_cur = t_next
        alive &= ~finished
        oob = (col < 0) | (col >= n) | (row < 0) | (row >= n)
        alive &= ~oob
    if alive.any():
        raise RuntimeError("ray traversal failed to terminate")
    if not out_ray:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0)
    return (
        np.concatenate(out_ray),
        np.concatenate(out_cell),
        np.concatenate(out_len),
    )


# ---------------------------------------------------------------------------
# Image rotation
# ---------------------------------------------------------------------------

_ROT_CACHE: dict = {}
_ROT_LOCK = threading.Lock()
_ROT_CACHE_MAX = 1024


def rotation_operator(n_px: int, theta: float) -> sp.csr_matrix:
    """Sparse bilinear-interpolation operator rotating an n x n image by theta.

    The operator acts on flattened images. Sample points falling outside
    the input extent contribute zero. Operators are cached per (size, angle).
    """
    key = (n_px, float(theta))
    with _ROT_LOCK:
        hit = _ROT_CACHE.get(key)
    if hit is not None:
        return hit

    n = n_px
    half = (n - 1) / 2.0
    idx = np.arange(n) - half
    xs_out, ys_out = np.meshgrid(idx, idx, indexing="xy")  # x along cols, y along rows
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # content rotated by +theta: sample the input at the inversely rotated point
    x_src = cos_t * xs_out + sin_t * ys_out
    y_src = -sin_t * xs_out + cos_t * ys_out
    js = (x_src + half).ravel()
    is_ = (y_src + half).ravel()

    j0 = np.floor(js).astype(np.int64)
    i0 = np.floor(is_).astype(np.int64)
    fj = js - j0
    fi = is_ - i0

    rows_out = np.arange(n * n, dtype=np.int64)
    coo_r, coo_c, coo_w = [], [], []
    for di, dj, w in (
        (0, 0, (1 - fi) * (1 - fj)),
        (0, 1, (1 - fi) * fj),
        (1, 0, fi * (1 - fj)),
        (1, 1, fi * fj),
    ):
        ii = i0 + di
        jj = j0 + dj
        ok = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n) & (w != 0)
        coo_r.append(rows_out[ok])
        coo_c.append(ii[ok] * n + jj[ok])
        coo_w.append(w[ok])
    mat = sp.coo_matrix(
        (np.concatenate(coo_w), (np.concatenate(coo_r), np.concatenate(coo_c))),
        shape=(n * n, n * n),
    ).tocsr()

    with _ROT_LOCK:
        if len(_ROT_CACHE) >= _ROT_CACHE_MAX:
            _ROT_CACHE.clear()
        _ROT_CACHE[key] = mat
    return mat


def rotate_image(img: np.ndarray, theta: float) -> np.ndarray:
    """Rotate image content by theta radians with bilinear interpolation."""
    img = np.asarray(img, dtype=float)
    n = img.shape[0]
    if img.shape != (n, n):
        raise InvalidInputError(f"rotate_image expects a square image, got {img.shape}")
    if theta == 0.0:
        return img.copy()
    return (rotation_operator(n, theta) @ img.ravel()).reshape(n, n)


def rotate_adjoint(img: np.ndarray, theta: float) -> np.ndarray:
    """Exact transpose of :func:`rotate_image` for the same angle."""
    img = np.asarray(img, dtype=float)
    n = img.shape[0]
    if theta == 0.0:
        return img.copy()
    return (rotation_operator(n, theta).T @ img.ravel()).reshape(n, n)


# ---------------------------------------------------------------------------
# Ray tables
# ---------------------------------------------------------------------------

class RayTables:
    """Precomputed detection probabilities, vertical corrections and path lengths.

    ``r[m, n]`` is the probability that a photon emitted from pixel ``m``
    is detected at offset ``n``; ``c[m, n]`` corrects for out-of-plane paths;
    ``d`` holds the in-plane distances covered in every pixel by the ray
    from pixel ``m`` towards the detector plane. Because acceptance rays are
    parallel at the reference angle the path of a source pixel is shared by
    all offsets that see it; the per-offset view is exposed through
    :meth:`d_entries`.
    """

    def __init__(self, grid, det, footprint, c_data, paths, vertical_model, table_hash):
        self.grid: GridSpec = grid
        self.det: DetectorSpec = det
        self.footprint: sp.csr_matrix = footprint  # [n_offsets, n_px^2], data = r
        self.c_data: np.ndarray = c_data  # aligned with footprint.data
        self.paths: sp.csr_matrix = paths  # [n_px^2, n_px^2], data = lengths (mm)
        self.vertical_model: str = vertical_model
        self.table_hash: int = table_hash
        self._fp_rows = np.repeat(
            np.arange(det.n_offsets, dtype=np.int64), np.diff(footprint.indptr)
        )

    # -- spec-shaped dense views -------------------------------------------------
    @cached_property
    def r(self) -> np.ndarray:
        """Dense detection probabilities, shape [n_px^2, n_offsets]."""
        return np.asarray(self.footprint.toarray().T)

    @cached_property
    def c(self) -> np.ndarray:
        """Dense vertical correction factors, shape [n_px^2, n_offsets]; 1 off-footprint."""
        mat = sp.csr_matrix(
            (self.c_data, self.footprint.indices, self.footprint.indptr),
            shape=self.footprint.shape,
        ).toarray().T
        mat[mat == 0.0] = 1.0
        return mat

    def d_entries(self, offset_index: int):
        """Per-offset list of (source pixel, crossed pixel, length) triples."""
        lo, hi = self.footprint.indptr[offset_index], self.footprint.indptr[offset_index + 1]
        sources = self.footprint.indices[lo:hi]
        ms, ks, ls = [], [], []
        for m in sources:
            row = self.paths.getrow(m)
            ms.append(np.full(row.nnz, m, dtype=np.int64))
            ks.append(row.indices.astype(np.int64))
            ls.append(row.data)
        if not ms:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty, np.empty(0)
        return np.concatenate(ms), np.concatenate(ks), np.concatenate(ls)

    def rotation(self, theta: float) -> sp.csr_matrix:
        return rotation_operator(self.grid.n_px, theta)

    @property
    def fp_rows(self) -> np.ndarray:
        """Offset index of each footprint entry (aligned with footprint.data)."""
        return self._fp_rows


def _triangle_average(dy: np.ndarray, half_width: float, pixel_size: float) -> np.ndarray:
    """Mean of the unit triangle max(0, 1 - |t|/h) over [dy - px/2, dy + px/2]."""

    def antiderivative(t):
        inside = t - np.sign(t) * t * t / (2.0 * half_width)
        return np.where(np.abs(t) >= half_width, np.sign(t) * half_width / 2.0, inside)

    lo = dy - pixel_size / 2.0
    hi = dy + pixel_size / 2.0
    return (antiderivative(hi) - antiderivative(lo)) / pixel_size


def _table_hash(grid: GridSpec, det: DetectorSpec, vertical_model: str, half_height: float,
                solid_angle: bool, ring_radius: float) -> int:
    text = "pget-tables|grid=%d,%.12g|det=%d,%.12g,%d,%.12g|vert=%s,%.12g|sa=%d,%.12g" % (
        grid.n_px,
        grid.pixel_size,
        det.n_offsets,
        det.offset_pitch,
        det.n_angles,
        det.collimator_width,
        vertical_model,
        half_height,
        int(solid_angle),
        ring_radius,
    )
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def build_ray_tables(
    grid: GridSpec,
    det: DetectorSpec,
    vertical_model: str = "planar",
    vertical_half_height: float = 40.0,
    solid_angle: bool = True,
    ring_radius: float | None = None,
) -> RayTables:
    """Precompute r, c and d for the reference angle.

    Rays start at in-disk pixel centers and travel along +x until they exit
    the disk. The collimator footprint is triangular in the perpendicular
    offset distance, optionally shaped by an inverse-square factor of the
    distance to the detector ring, and normalized so the best-placed pixel
    has r = 1. The ring sits at 2.5 domain radii by default so the factor
    stays within one order of magnitude across the disk.
    """
    if det.n_offsets * det.offset_pitch < 2.0 * grid.r_domain:
        raise InvalidInputError(
            "detector span %.3f mm is smaller than the disk diameter %.3f mm"
            % (det.n_offsets * det.offset_pitch, 2.0 * grid.r_domain)
        )
    if vertical_model not in ("planar", "geometric"):
        raise InvalidInputError(f"unknown vertical model: {vertical_model!r}")
    if ring_radius is None:
        ring_radius = 2.5 * grid.r_domain
    if ring_radius <= grid.r_domain:
        raise InvalidInputError("detector ring must sit outside the disk")

    n = grid.n_px
    mask = disk_mask(grid)
    flat_mask = mask.ravel()
    coords = grid.centers()
    xs = np.tile(coords, n)  # x of flat pixel index
    ys = np.repeat(coords, n)  # y of flat pixel index

    # path lengths: one parallel ray per in-disk source pixel, clipped at the disk edge
    src = np.nonzero(flat_mask)[0]
    origins = np.stack([xs[src], ys[src]], axis=1)
    t_end = chord_length(grid, origins, np.array([1.0, 0.0]))
    ray_idx, cell_flat, lengths = trace_rays(grid, origins, np.array([1.0, 0.0]), t_end)
    paths = sp.coo_matrix(
        (lengths, (src[ray_idx], cell_flat)), shape=(n * n, n * n)
    ).tocsr()
    paths.sum_duplicates()

    # footprint weights r[m, n] for in-disk sources
    offsets = det.offsets()
    half_w = det.collimator_width / 2.0
    dy = ys[src][:, None] - offsets[None, :]
    # triangular acceptance averaged over the pixel's offset extent, so the
    # kernel quadrature (and hence the sinogram scale) is resolution independent
    tri = _triangle_average(dy, half_w, grid.pixel_size)
    if solid_angle:
        # normalized by the closest possible approach so the kernel peaks at 1
        # independently of the grid resolution
        dist = np.hypot(ring_radius - xs[src][:, None], offsets[None, :] - ys[src][:, None])
        tri = tri * ((ring_radius - grid.r_domain) / np.maximum(dist, 1e-9)) ** 2

    m_idx, n_idx = np.nonzero(tri)
    r_vals = tri[m_idx, n_idx]
    footprint = sp.coo_matrix(
        (r_vals, (n_idx, src[m_idx])), shape=(det.n_offsets, n * n)
    ).tocsr()
    footprint.sum_duplicates()

    # vertical correction, aligned with the footprint sparsity
    if vertical_model == "planar":
        c_data = np.ones_like(footprint.data)
    else:
        cols = footprint.indices
        rows = np.repeat(np.arange(det.n_offsets), np.diff(footprint.indptr))
        dist = np.hypot(ring_radius - xs[cols], offsets[rows] - ys[cols])
        c_data = np.sqrt(1.0 + (vertical_half_height / np.maximum(dist, 1e-9)) ** 2)

    return RayTables(
        grid=grid,
        det=det,
        footprint=footprint,
        c_data=c_data,
        paths=paths,
        vertical_model=vertical_model,
        table_hash=_table_hash(grid, det, vertical_model, vertical_half_height, solid_angle, ring_radius),
    )
