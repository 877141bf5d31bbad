"""Synthetic fuel-assembly phantoms and dataset generation.

Assemblies are 9 x 9 lattices of circular rods inside the water-filled
disk. Each rod is present (emitting, attenuating), missing (water) or
replaced (attenuating only). Ground-truth images are rasterized on a
supersampled grid and box-filtered down; measured data are projected from
the supersampled rasterization so the reconstruction grid never sees its
own discretization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import InvalidInputError
from .forward import ImagePair
from .geometry import GridSpec, disk_mask, rotate_image
from .rng import STREAM_ASSEMBLY, STREAM_ROTATION, philox

__all__ = [
    "AssemblySpec",
    "Rod",
    "Assembly",
    "sample_assembly",
    "assembly_from_rods",
    "load_extreme_assemblies",
    "rasterize",
    "random_rotation_pair",
    "standard_plan",
]

TIERS = ("standard", "medium", "hard", "extreme")
STANDARD_BRANCHES = ("full", "missing", "replaced")


@dataclass(frozen=True)
class AssemblySpec:
    """Geometry and material ranges of the simulated assembly."""

    lattice_n: int = 9
    rod_pitch: float = 13.0
    rod_radius: float = 5.5
    position_jitter_sigma: float = 0.5
    emission_range: tuple[float, float] = (6.5e5, 7.0e5)
    attenuation_range: tuple[float, float] = (0.12, 0.14)
    water_attenuation: float = 0.0085

    def __post_init__(self):
        if self.emission_range[0] >= self.emission_range[1]:
            raise InvalidInputError("emission range is empty")
        if self.attenuation_range[0] >= self.attenuation_range[1]:
            raise InvalidInputError("attenuation range is empty")
        for v in (self.rod_pitch, self.rod_radius, self.water_attenuation):
            if v <= 0:
                raise InvalidInputError("assembly dimensions must be positive")
        if self.position_jitter_sigma < 0:
            raise InvalidInputError("jitter sigma must be nonnegative")

    def validate_grid(self, grid: GridSpec) -> None:
        extent = self.lattice_n * self.rod_pitch + 2 * self.rod_radius
        if extent >= 2 * grid.r_domain:
            raise InvalidInputError(
                "lattice extent %.1f mm does not fit the %.1f mm disk"
                % (extent, 2 * grid.r_domain)
            )

    @property
    def bounds(self) -> tuple[float, float]:
        return (self.emission_range[1], self.attenuation_range[1])

    def lattice_centers(self) -> np.ndarray:
        """Nominal rod centers, shape [lattice_n^2, 2], in mm."""
        k = self.lattice_n
        line = (np.arange(k) - (k - 1) / 2.0) * self.rod_pitch
        gx, gy = np.meshgrid(line, line, indexing="xy")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass
class Rod:
    center: tuple[float, float]
    state: str  # present | missing | replaced
    emission: float
    attenuation: float


@dataclass
class Assembly:
    spec: AssemblySpec
    rods: list[Rod]
    tier: str = "standard"

    def count(self, state: str) -> int:
        return sum(1 for rod in self.rods if rod.state == state)


def _draw_rod_values(rng, spec, emission_low_frac, replaced_low_frac, states):
    rods = []
    centers = spec.lattice_centers()
    sigma = spec.position_jitter_sigma
    # clipped at 3 sigma so jittered corner rods cannot leave the disk
    jitter = np.clip(rng.normal(0.0, sigma, centers.shape), -3 * sigma, 3 * sigma)
    e_lo, e_hi = spec.emission_range
    a_lo, a_hi = spec.attenuation_range
    for i, state in enumerate(states):
        cx, cy = centers[i] + jitter[i]
        if state == "present":
            emission = rng.uniform(emission_low_frac * e_hi if emission_low_frac else e_lo, e_hi)
            attenuation = rng.uniform(a_lo, a_hi)
        elif state == "missing":
            emission = 0.0
            attenuation = spec.water_attenuation
        elif state == "replaced":
            emission = 0.0
            attenuation = rng.uniform(replaced_low_frac * a_hi if replaced_low_frac else a_lo, a_hi)
        else:
            raise InvalidInputError(f"unknown rod state {state!r}")
        rods.append(Rod((float(cx), float(cy)), state, float(emission), float(attenuation)))
    return rods


def sample_assembly(
    spec: AssemblySpec,
    tier: str,
    rng_seed: int,
    branch: str | None = None,
) -> Assembly:
    """Draw a random assembly for the given difficulty tier.

    For the standard tier ``branch`` picks one of ``full`` (all rods
    present), ``missing`` (1 to 6 rods removed) or ``replaced`` (5 or 6
    non-emitting rods); when omitted it is drawn with the standard dataset
    proportions. Medium and hard tiers disturb 1 to 20 rods and let the
    emission of present rods and the attenuation of replaced rods drop to
    70 percent of their maxima. Extreme assemblies are hand-specified, see
    :func:`assembly_from_rods`.
    """
    if tier not in TIERS:
        raise InvalidInputError(f"unknown tier {tier!r}")
    if tier == "extreme":
        raise InvalidInputError("extreme tier requires an explicit rod list")
    rng = philox(rng_seed, STREAM_ASSEMBLY)
    n_rods = spec.lattice_n**2
    states = np.array(["present"] * n_rods, dtype=object)

    if tier == "standard":
        if branch is None:
            branch = rng.choice(STANDARD_BRANCHES, p=[200 / 1200, 500 / 1200, 500 / 1200])
        if branch not in STANDARD_BRANCHES:
            raise InvalidInputError(f"unknown standard branch {branch!r}")
        if branch == "missing":
            n_out = int(rng.integers(1, 7))
            states[rng.choice(n_rods, size=n_out, replace=False)] = "missing"
        elif branch == "replaced":
            n_out = int(rng.integers(5, 7))
            states[rng.choice(n_rods, size=n_out, replace=False)] = "replaced"
        rods = _draw_rod_values(rng, spec, None, None, states)
    else:  # medium / hard share the rule; the tag records intended difficulty
        n_out = int(rng.integers(1, 21))
        picked = rng.choice(n_rods, size=n_out, replace=False)
        kinds = rng.integers(0, 2, size=n_out)
        for j, idx in enumerate(picked):
            states[idx] = "missing" if kinds[j] == 0 else "replaced"
        rods = _draw_rod_values(rng, spec, 0.70, 0.70, states)
    return Assembly(spec=spec, rods=rods, tier=tier)


def assembly_from_rods(spec: AssemblySpec, rod_dicts, tier: str = "extreme") -> Assembly:
    """Build an assembly from explicit rod descriptions."""
    rods = []
    for entry in rod_dicts:
        rods.append(
            Rod(
                center=(float(entry["center"][0]), float(entry["center"][1])),
                state=str(entry["state"]),
                emission=float(entry["emission"]),
                attenuation=float(entry["attenuation"]),
            )
        )
    return Assembly(spec=spec, rods=rods, tier=tier)


def load_extreme_assemblies(spec: AssemblySpec | None = None) -> list[Assembly]:
    """The four hand-crafted difficult configurations shipped with the package."""
    spec = spec or AssemblySpec()
    out = []
    root = resources.files("pget_recon").joinpath("data/extreme")
    for name in sorted(p.name for p in root.iterdir() if p.name.endswith(".json")):
        payload = json.loads(root.joinpath(name).read_text())
        out.append(assembly_from_rods(spec, payload["rods"]))
    return out


def rasterize(assembly: Assembly, grid: GridSpec, supersample: int = 2) -> ImagePair:
    """Paint the assembly on a supersampled grid and box-filter down.

    Every fine pixel is classified by testing its center against the rod
    circles; non-rod pixels inside the disk carry water attenuation and the
    result is exactly zero outside the coarse disk mask.
    """
    if supersample < 1 or int(supersample) != supersample:
        raise InvalidInputError("supersample must be a positive integer")
    spec = assembly.spec
    for rod in assembly.rods:
        if np.hypot(*rod.center) + spec.rod_radius > grid.r_domain:
            raise InvalidInputError("rod extends outside the reconstruction disk")

    fine = fine_grid(grid, supersample)
    lam_f, mu_f = rasterize_fine(assembly, fine)
    lam = _downsample(lam_f, supersample)
    mu = _downsample(mu_f, supersample)
    inside = disk_mask(grid)
    lam[~inside] = 0.0
    mu[~inside] = 0.0
    return ImagePair(lam, mu, spec.bounds)


def fine_grid(grid: GridSpec, supersample: int) -> GridSpec:
    """The supersampled grid covering the same physical domain.

    Built directly because supersampled grids may have an even pixel count;
    the center-pixel requirement applies to reconstruction grids only.
    """
    return GridSpec(n_px=grid.n_px * supersample, pixel_size=grid.pixel_size / supersample)


def rasterize_fine(assembly: Assembly, fine: GridSpec):
    """Classify fine pixels; returns (emission, attenuation) at fine resolution."""
    spec = assembly.spec
    coords = fine.centers()
    X, Y = np.meshgrid(coords, coords, indexing="xy")
    rr = X**2 + Y**2
    in_disk = rr <= fine.r_domain**2
    lam = np.zeros_like(X)
    mu = np.where(in_disk, spec.water_attenuation, 0.0)
    r2 = spec.rod_radius**2
    for rod in assembly.rods:
        if rod.state == "missing":
            continue
        hit = (X - rod.center[0]) ** 2 + (Y - rod.center[1]) ** 2 <= r2
        lam[hit] = rod.emission
        mu[hit] = rod.attenuation
    return lam, mu


def _downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img.copy()
    n = img.shape[0] // factor
    return img.reshape(n, factor, n, factor).mean(axis=(1, 3))


def random_rotation_pair(inputs: np.ndarray, target: ImagePair, seed: int,
                         max_deg: float = 5.0):
    """Rotate an input stack and its target by one shared random angle.

    The angle is uniform in [-max_deg, +max_deg] degrees and identical for
    every channel of both arguments.
    """
    rng = philox(seed, STREAM_ROTATION)
    phi = float(rng.uniform(-max_deg, max_deg)) * np.pi / 180.0
    rotated_inputs = np.stack([rotate_image(ch, phi) for ch in inputs])
    rotated_target = ImagePair(
        rotate_image(target.emission, phi),
        rotate_image(target.attenuation, phi),
        target.bounds,
    )
    return rotated_inputs, rotated_target, phi


def standard_plan() -> list[tuple[str, str | None, int]]:
    """Tier plan of the standard 1200-sample dataset."""
    return [
        ("standard", "full", 200),
        ("standard", "missing", 500),
        ("standard", "replaced", 500),
    ]


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def build_dataset(
    out_dir,
    spec: AssemblySpec,
    grid: GridSpec,
    det,
    plan=None,
    master_seed: int = 0,
    noise_level: float = 0.02,
    supersample: int = 2,
    split=(1000, 200),
    extra_meta: dict | None = None,
):
    """Generate ground-truth pairs and noisy measurements for a tier plan.

    Sinograms are projected from the supersampled rasterization (scaled to
    the target grid's per-pixel convention) so the reconstruction grid
    never sees its own discretization. Everything is derived from
    ``master_seed`` through fixed counter-based streams, so reruns are
    byte-identical.
    """
    from pathlib import Path

    from .geometry import build_ray_tables
    from .forward import ImagePair, Sinogram, add_noise, project
    from .io_cli.formats import ManifestEntry, write_imgpair, write_manifest, write_sinogram
    from .rng import STREAM_SPLIT, philox, sample_seed

    plan = plan or standard_plan()
    spec.validate_grid(grid)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "sinos").mkdir(parents=True, exist_ok=True)

    tables = build_ray_tables(grid, det)
    fine = fine_grid(grid, supersample)
    fine_tables = build_ray_tables(fine, det) if supersample > 1 else tables
    scale = 1.0 / supersample**2

    jobs = []
    for tier, branch, count in plan:
        for _ in range(count):
            jobs.append((tier, branch))
    n_total = len(jobs)
    if split[0] + split[1] != n_total:
        raise InvalidInputError(
            f"split {split} does not cover the {n_total} samples in the plan"
        )
    perm = philox(master_seed, STREAM_SPLIT).permutation(n_total)
    split_of = np.empty(n_total, dtype=object)
    split_of[perm[: split[0]]] = "train"
    split_of[perm[split[0]:]] = "val"

    entries = []
    for i, (tier, branch) in enumerate(jobs):
        seed = sample_seed(master_seed, i)
        assembly = sample_assembly(spec, tier, seed, branch=branch)
        gt = rasterize(assembly, grid, supersample)
        lam_f, mu_f = rasterize_fine(assembly, fine)
        sino_fine = project(ImagePair(lam_f, mu_f, spec.bounds), fine_tables)
        sino = Sinogram(sino_fine.y * scale, tables.table_hash)
        sino = add_noise(sino, noise_level, seed)
        img_rel = f"images/s{i:05d}.imgpair"
        sino_rel = f"sinos/s{i:05d}.sino"
        write_imgpair(out / img_rel, gt)
        write_sinogram(out / sino_rel, sino)
        entries.append(
            ManifestEntry(sample_id=i, tier=tier, branch=branch, split=split_of[i],
                          seed=seed, image=img_rel, sinogram=sino_rel)
        )

    meta = {
        "master_seed": master_seed,
        "noise_level": noise_level,
        "supersample": supersample,
        "n_px": grid.n_px,
        "pixel_size": grid.pixel_size,
        "n_offsets": det.n_offsets,
        "offset_pitch": det.offset_pitch,
        "n_angles": det.n_angles,
        "collimator_width": det.collimator_width,
        "table_hash": tables.table_hash,
        "lattice_n": spec.lattice_n,
        "rod_pitch": spec.rod_pitch,
        "rod_radius": spec.rod_radius,
        "position_jitter_sigma": spec.position_jitter_sigma,
        "emission_range": "%r %r" % spec.emission_range,
        "attenuation_range": "%r %r" % spec.attenuation_range,
        "water_attenuation": spec.water_attenuation,
        "split_train": split[0],
        "split_val": split[1],
    }
    for tier, branch, count in plan:
        meta[f"count_{tier}_{branch}"] = count
    if extra_meta:
        meta.update(extra_meta)
    write_manifest(out / "manifest.txt", meta, entries)
    return load_dataset(out)


class Dataset:
    """On-disk dataset handle: manifest rows plus reconstruction context."""

    def __init__(self, root, manifest):
        from pathlib import Path

        self.root = Path(root)
        self.manifest = manifest

    @property
    def entries(self):
        return self.manifest.entries

    def meta(self, key, cast=str):
        return cast(self.manifest.meta[key])

    def grid(self) -> GridSpec:
        return GridSpec(self.meta("n_px", int), self.meta("pixel_size", float))

    def detector(self):
        from .geometry import DetectorSpec

        return DetectorSpec(
            n_offsets=self.meta("n_offsets", int),
            offset_pitch=self.meta("offset_pitch", float),
            n_angles=self.meta("n_angles", int),
            collimator_width=self.meta("collimator_width", float),
        )

    def assembly_spec(self) -> AssemblySpec:
        emission = tuple(float(v) for v in self.manifest.meta["emission_range"].split())
        attenuation = tuple(float(v) for v in self.manifest.meta["attenuation_range"].split())
        return AssemblySpec(
            lattice_n=self.meta("lattice_n", int),
            rod_pitch=self.meta("rod_pitch", float),
            rod_radius=self.meta("rod_radius", float),
            position_jitter_sigma=self.meta("position_jitter_sigma", float),
            emission_range=emission,
            attenuation_range=attenuation,
            water_attenuation=self.meta("water_attenuation", float),
        )

    @property
    def bounds(self):
        return self.assembly_spec().bounds

    def load_truth(self, entry):
        from .io_cli.formats import read_imgpair

        return read_imgpair(self.root / entry.image, self.bounds)

    def load_sinogram(self, entry):
        from .io_cli.formats import read_sinogram

        return read_sinogram(self.root / entry.sinogram)


def load_dataset(root) -> Dataset:
    from pathlib import Path

    from .io_cli.formats import read_manifest

    return Dataset(root, read_manifest(Path(root) / "manifest.txt"))
