"""Command-line entry points.

Every subcommand is deterministic for a fixed seed and writes artifacts
with stable bytes. ``PGET_THREADS`` caps the numerical thread pools and
must take effect before the array stack loads. Exit codes: 0 success,
2 invalid input, 3 numerical stall, 4 malformed file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_CAP = os.environ.get("PGET_THREADS")
if _CAP:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _CAP)

import numpy as np

from ..errors import FormatError, InvalidInputError, PgetError, StallError
from ..forward import ImagePair, add_noise, project
from ..phantom import build_dataset, load_dataset, standard_plan
from ..safeguard import accelerated_solve
from ..solver import Problem, initial_guess, lm_solve
from .batch import advance_dataset, export_training_batch
from .formats import read_imgpair, read_sinogram, write_imgpair, write_sinogram
from .jobs import JobContext, dump_job, load_job
from .metrics import compute_metrics
from .render import render


def n_workers() -> int:
    cap = os.environ.get("PGET_THREADS")
    if cap:
        return max(1, int(cap))
    return os.cpu_count() or 1


def _add_job_flags(p):
    p.add_argument("--job", help="job file (JSON); flags override its values")
    p.add_argument("--n-px", type=int)
    p.add_argument("--pixel-size", type=float)
    p.add_argument("--n-angles", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--init", choices=["half", "site", "bright-site"])
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--rel-alpha1", type=float)
    p.add_argument("--rel-alpha2", type=float)
    p.add_argument("--sgp-max-inner", type=int)


def _job_from_args(args) -> dict:
    overrides = {
        "grid": {"n_px": args.n_px, "pixel_size": args.pixel_size},
        "detector": {"n_angles": args.n_angles},
        "regularization": {"rel_alpha1": args.rel_alpha1, "rel_alpha2": args.rel_alpha2},
        "solver": {"iterations": args.iters, "sgp_max_inner": args.sgp_max_inner},
        "init": args.init,
        "noise_level": args.noise,
        "seed": args.seed,
    }
    return load_job(args.job, overrides)


def cmd_gen_data(args) -> int:
    job = _job_from_args(args)
    ctx = JobContext(job)
    if args.counts:
        counts = [int(v) for v in args.counts.split(",")]
        if len(counts) != 3:
            raise InvalidInputError("--counts expects full,missing,replaced")
        plan = [("standard", "full", counts[0]), ("standard", "missing", counts[1]),
                ("standard", "replaced", counts[2])]
    else:
        plan = standard_plan()
    if args.split:
        split = tuple(int(v) for v in args.split.split(","))
    else:
        total = sum(c for _, _, c in plan)
        val = max(1, total // 6)
        split = (total - val, val)
    out = Path(args.out)
    dataset = build_dataset(
        out, ctx.assembly, ctx.grid, ctx.det, plan=plan,
        master_seed=int(job["seed"]), noise_level=float(job["noise_level"]),
        supersample=int(job["supersample"]), split=split,
    )
    dump_job(job, out / "job.json")
    print(f"wrote {len(dataset.entries)} samples to {out}")
    return 0


def cmd_project(args) -> int:
    job = _job_from_args(args)
    ctx = JobContext(job)
    pair = read_imgpair(args.image, ctx.assembly.bounds)
    sino = project(pair, ctx.tables)
    if args.noise is not None and args.noise > 0:
        sino = add_noise(sino, args.noise, int(job["seed"]))
    write_sinogram(args.out, sino)
    print(f"wrote sinogram {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    job = _job_from_args(args)
    ctx = JobContext(job)
    y = read_sinogram(args.sino)
    constraints = ctx.constraints()
    problem = Problem(y, ctx.tables, ctx.regularization(y), constraints)
    u0 = initial_guess(ctx.grid, ctx.assembly, constraints, job["init"])
    truth = read_imgpair(args.truth, ctx.assembly.bounds) if args.truth else None
    cfg = ctx.solver_config()
    iterations = ctx.iterations

    if args.method == "dgn":
        from ..accelerator import load_weights

        nets = [load_weights(p) for p in (args.nets.split(",") if args.nets else [])]
        traj = accelerated_solve(u0, nets, problem, iterations, cfg, truth=truth)
    else:
        traj = lm_solve(u0, problem, iterations, cfg, truth=truth)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    final = ImagePair(traj.final[0], traj.final[1], ctx.assembly.bounds)
    write_imgpair(out / "reconstruction.imgpair", final)
    write_trajectory_log(out / "trajectory.log", traj)
    dump_job(job, out / "job.json")
    if args.render:
        render(final, out / "reconstruction")
    if truth is not None:
        final_rec = traj.records[-1]
        print(f"rel_err_lambda {final_rec.rel_err_lambda:.6f} "
              f"rel_err_mu {final_rec.rel_err_mu:.6f}")
    print(f"wrote reconstruction to {out}")
    if traj.stalled:
        raise StallError("reconstruction stalled before the iteration budget")
    return 0


def write_trajectory_log(path, traj) -> None:
    lines = ["# k f rho beta delta alpha1 alpha2 rel_err_lambda rel_err_mu branch"]
    for r in traj.records:
        lines.append(
            f"{r.k} {r.f!r} {r.rho!r} {r.beta!r} {r.delta!r} {r.alpha1!r} {r.alpha2!r} "
            f"{r.rel_err_lambda!r} {r.rel_err_mu!r} {r.branch}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_export_batch(args) -> int:
    dataset = load_dataset(args.dataset)
    job = _job_from_args(args)
    ctx = JobContext(job)
    out = export_training_batch(dataset, args.k, ctx, args.out, split=args.split)
    print(f"wrote batch {out}")
    return 0


def cmd_advance(args) -> int:
    from ..accelerator import load_weights

    dataset = load_dataset(args.dataset)
    job = _job_from_args(args)
    ctx = JobContext(job)
    store = load_weights(args.weights)
    count = advance_dataset(dataset, args.batch, store, ctx)
    print(f"advanced {count} samples to iteration {store.iteration + 1}")
    return 0


def cmd_eval(args) -> int:
    bounds = (1.0, 1.0)
    est = read_imgpair(args.image, bounds)
    truth = read_imgpair(args.truth, bounds)
    from ..geometry import GridSpec, disk_mask

    mask = disk_mask(GridSpec(est.n_px, 1.0))
    m = compute_metrics(est, truth, mask)
    payload = {"rel_err_lambda": m.rel_err_lambda, "rel_err_mu": m.rel_err_mu}
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_render(args) -> int:
    bounds = (args.lambda_max, args.mu_max)
    pair = read_imgpair(args.image, bounds)
    lam_path, mu_path = render(pair, args.out)
    print(f"wrote {lam_path} and {mu_path}")
    return 0


def cmd_describe_weights(args) -> int:
    from ..accelerator import load_weights

    store = load_weights(args.weights)
    print(f"architecture: {store.arch}")
    print(f"iteration: {store.iteration}")
    print(f"bounds: {store.bounds[0]!r} {store.bounds[1]!r}")
    for name, dtype, shape in store.describe():
        print(f"  {name}  {dtype}  {shape}")
    print(f"parameters: {store.n_params}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pget", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_job_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--counts", help="standard tier counts: full,missing,replaced")
    p.add_argument("--split", help="train,val sample counts")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("project", help="project an image pair to a sinogram")
    _add_job_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("reconstruct", help="reconstruct a sinogram")
    _add_job_flags(p)
    p.add_argument("--sino", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["lm", "dgn"], default="lm")
    p.add_argument("--nets", help="comma-separated weight files, ordered by iteration")
    p.add_argument("--truth", help="ground-truth image pair for metrics")
    p.add_argument("--render", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("export-batch", help="export a training batch for iteration k")
    _add_job_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=["train", "val"])
    p.set_defaults(func=cmd_export_batch)

    p = sub.add_parser("advance", help="apply an iteration network to a batch")
    _add_job_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--batch", required=True)
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_advance)

    p = sub.add_parser("eval", help="masked relative errors against a ground truth")
    p.add_argument("--image", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render an image pair to PGM files")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-max", type=float, default=7.0e5)
    p.add_argument("--mu-max", type=float, default=0.14)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("describe-weights", help="print a weight file inventory")
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_describe_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StallError as exc:
        print(f"stall: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 4
    except (InvalidInputError, PgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
