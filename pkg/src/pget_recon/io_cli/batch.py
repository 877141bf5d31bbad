"""Training-batch export and iterate advancement for the greedy training loop.

Per outer iteration k the exporter computes one deterministic update step
from every sample's current iterate and stores (iterate, step, truth)
triples; the trainer fits an operator to them and ``advance`` applies it
(without rotation augmentation) to produce the iterates for k + 1. Solver
damping state evolves alongside the iterates so the training-time steps
match what an accelerated reconstruction would compute.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..accelerator import WeightStore, apply_accelerator
from ..errors import InvalidInputError
from ..forward import ImagePair
from ..phantom import Dataset
from ..solver import (
    Problem,
    decay_alpha,
    initial_state,
    initial_guess,
    lm_step,
    replace_state,
)
from .formats import read_batch, write_batch, write_imgpair, read_imgpair
from .jobs import JobContext, job_hash

__all__ = ["export_training_batch", "advance_dataset"]


def _iter_dir(dataset: Dataset, k: int) -> Path:
    return dataset.root / "iterates" / f"k{k}"


def _state_path(dataset: Dataset, k: int, sid: int) -> Path:
    return _iter_dir(dataset, k) / f"s{sid:05d}.state.json"


def _img_path(dataset: Dataset, k: int, sid: int) -> Path:
    return _iter_dir(dataset, k) / f"s{sid:05d}.imgpair"


def export_training_batch(dataset: Dataset, k: int, ctx: JobContext, out_path,
                          split: str = "train") -> Path:
    """One deterministic step per sample; writes the (u, s, truth) batch file.

    For k = 0 iterates start at the configured initial guess. For k > 0
    the iterates written by :func:`advance_dataset` must exist.
    """
    entries = dataset.manifest.split_entries(split)
    if not entries:
        raise InvalidInputError(f"dataset has no {split!r} samples")
    cfg = ctx.solver_config()
    bounds = dataset.bounds
    constraints = ctx.constraints()
    next_dir = _iter_dir(dataset, k + 1)
    next_dir.mkdir(parents=True, exist_ok=True)

    samples = []
    for entry in entries:
        y = dataset.load_sinogram(entry)
        truth = dataset.load_truth(entry)
        problem = Problem(y, ctx.tables, ctx.regularization(y), constraints)
        alphas = decay_alpha(k, problem.reg)
        if k == 0:
            u_pair = initial_guess(ctx.grid, ctx.assembly, constraints, ctx.job["init"])
            state = initial_state(problem, u_pair.stack(), cfg, alphas)
        else:
            u_pair = read_imgpair(_img_path(dataset, k, entry.sample_id), bounds)
            payload = json.loads(_state_path(dataset, k, entry.sample_id).read_text())
            state = initial_state(problem, u_pair.stack(), cfg, alphas)
            state = replace_state(state, beta=payload["beta"], delta=payload["delta"])
        state = replace_state(state, alphas=alphas, k=k)
        prop, new_state = lm_step(state, problem, cfg)
        samples.append((entry.sample_id, u_pair.stack(), prop.step, truth.stack()))
        _state_path(dataset, k + 1, entry.sample_id).write_text(
            json.dumps({"beta": new_state.beta, "delta": new_state.delta})
        )
    write_batch(out_path, k, ctx.grid.n_px, job_hash(ctx.job), False, bounds, samples)
    return Path(out_path)


def advance_dataset(dataset: Dataset, batch_path, store: WeightStore,
                    ctx: JobContext) -> int:
    """Apply the iteration-k operator to every sample of a batch.

    No rotation augmentation is applied on this path. Outputs are
    projected onto the feasible set and become the k + 1 iterates.
    """
    batch = read_batch(batch_path)
    if batch.augmented:
        raise InvalidInputError("advance requires a batch exported without augmentation")
    if store.arch not in ("cnn", "fno", "wno"):
        raise InvalidInputError(f"unknown architecture {store.arch!r}")
    constraints = ctx.constraints()
    out_dir = _iter_dir(dataset, batch.k + 1)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, sid in enumerate(batch.sample_ids):
        pair = ImagePair(batch.u[i, 0], batch.u[i, 1], batch.bounds)
        refined = apply_accelerator(store, pair, batch.s[i])
        proj = constraints.project_stack(refined.stack())
        write_imgpair(_img_path(dataset, batch.k + 1, int(sid)),
                      ImagePair(proj[0], proj[1], batch.bounds))
    return len(batch.sample_ids)
