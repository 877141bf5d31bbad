"""Reconstruction job files: structured JSON consumed by the CLI.

A job bundles everything a reconstruction needs besides the measurement:
grid, detector, assembly parameters, priors, solver settings, the initial
guess recipe and seeds. Flags override file values; the effective job is
echoed next to every artifact so runs are reproducible.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from ..errors import InvalidInputError
from ..geometry import GridSpec, build_grid, build_ray_tables, default_detector, DetectorSpec
from ..phantom import AssemblySpec
from ..solver import (
    Constraints,
    RegularizationConfig,
    SGPConfig,
    SolverConfig,
    default_alphas,
    default_constraints,
    geometry_prior_weights,
)


def default_job() -> dict:
    return {
        "grid": {"n_px": 165, "pixel_size": 1.0},
        "detector": {
            "offset_pitch": 2.0,
            "n_angles": 120,
            "collimator_width": 4.0,
            "n_offsets": None,  # derived from the grid diagonal when null
        },
        "assembly": {
            "lattice_n": 9,
            "rod_pitch": 13.0,
            "rod_radius": 5.5,
            "position_jitter_sigma": 0.5,
            "emission_range": [6.5e5, 7.0e5],
            "attenuation_range": [0.12, 0.14],
            "water_attenuation": 0.0085,
        },
        "regularization": {
            "rel_alpha1": 1.0,
            "rel_alpha2": 1.0,
            "decay_factor": 5.0,
            "freeze_after": 3,
        },
        "solver": {
            "eta": 0.1,
            "accept_threshold": 0.1,
            "retry_max": 8,
            "iterations": 15,
            "sgp_tol": 1e-6,
            "sgp_max_inner": 200,
        },
        "init": "half",
        "noise_level": 0.02,
        "seed": 0,
        "supersample": 2,
    }


def load_job(path=None, overrides: dict | None = None) -> dict:
    job = default_job()
    if path is not None:
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}: not valid JSON ({exc})") from exc
        _merge(job, payload)
    if overrides:
        _merge(job, overrides)
    return job


def _merge(base: dict, extra: dict) -> None:
    for key, value in extra.items():
        if value is None and key not in ("n_offsets",):
            continue
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def dump_job(job: dict, path) -> None:
    Path(path).write_text(json.dumps(job, indent=1, sort_keys=True) + "\n")


def job_hash(job: dict) -> int:
    blob = json.dumps(job, sort_keys=True).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


class JobContext:
    """Materialized objects for a job dictionary."""

    def __init__(self, job: dict):
        self.job = job
        g = job["grid"]
        self.grid: GridSpec = build_grid(int(g["n_px"]), float(g["pixel_size"]))
        d = job["detector"]
        if d.get("n_offsets"):
            self.det = DetectorSpec(
                n_offsets=int(d["n_offsets"]),
                offset_pitch=float(d["offset_pitch"]),
                n_angles=int(d["n_angles"]),
                collimator_width=float(d["collimator_width"]),
            )
        else:
            self.det = default_detector(
                self.grid,
                offset_pitch=float(d["offset_pitch"]),
                n_angles=int(d["n_angles"]),
                collimator_width=float(d["collimator_width"]),
            )
        a = job["assembly"]
        self.assembly = AssemblySpec(
            lattice_n=int(a["lattice_n"]),
            rod_pitch=float(a["rod_pitch"]),
            rod_radius=float(a["rod_radius"]),
            position_jitter_sigma=float(a["position_jitter_sigma"]),
            emission_range=tuple(a["emission_range"]),
            attenuation_range=tuple(a["attenuation_range"]),
            water_attenuation=float(a["water_attenuation"]),
        )
        self._tables = None

    @property
    def tables(self):
        if self._tables is None:
            self._tables = build_ray_tables(self.grid, self.det)
        return self._tables

    def constraints(self) -> Constraints:
        return default_constraints(self.grid, self.assembly)

    def regularization(self, y_delta) -> RegularizationConfig:
        r = self.job["regularization"]
        weights = geometry_prior_weights(self.grid, self.assembly)
        alphas = default_alphas(
            y_delta, weights, self.constraints(),
            rel=(float(r["rel_alpha1"]), float(r["rel_alpha2"])),
        )
        return RegularizationConfig(
            alpha1=alphas[0], alpha2=alphas[1], geometry_weights=weights,
            decay_factor=float(r["decay_factor"]), freeze_after=int(r["freeze_after"]),
        )

    def solver_config(self) -> SolverConfig:
        s = self.job["solver"]
        return SolverConfig(
            eta=float(s["eta"]),
            accept_threshold=float(s["accept_threshold"]),
            retry_max=int(s["retry_max"]),
            sgp=SGPConfig(tol=float(s["sgp_tol"]), max_inner=int(s["sgp_max_inner"])),
        )

    @property
    def iterations(self) -> int:
        return int(self.job["solver"]["iterations"])
