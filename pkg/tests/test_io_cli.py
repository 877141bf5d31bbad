import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pget_recon import geometry as geo
from pget_recon import phantom as ph
from pget_recon import solver as sv
from pget_recon.accelerator import init_weights, zero_weights
from pget_recon.errors import FormatError, InvalidInputError
from pget_recon.forward import ImagePair, Sinogram
from pget_recon.io_cli import formats
from pget_recon.io_cli.batch import advance_dataset, export_training_batch
from pget_recon.io_cli.cli import main as cli_main
from pget_recon.io_cli.jobs import JobContext, default_job, job_hash, load_job
from pget_recon.io_cli.metrics import compute_metrics
from pget_recon.io_cli.render import render

SPEC = ph.AssemblySpec()
BOUNDS = SPEC.bounds


def small_job(tmp):
    job = default_job()
    job["grid"] = {"n_px": 33, "pixel_size": 5.0}
    job["detector"]["n_angles"] = 8
    job["solver"]["iterations"] = 2
    job["solver"]["sgp_max_inner"] = 40
    job["init"] = "site"
    path = tmp / "job.json"
    path.write_text(json.dumps(job))
    return path, job


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    grid = geo.build_grid(33, 5.0)
    det = geo.default_detector(grid, n_angles=8)
    plan = [("standard", "full", 2), ("standard", "missing", 2), ("standard", "replaced", 2)]
    ds = ph.build_dataset(root, SPEC, grid, det, plan=plan, master_seed=3,
                          noise_level=0.02, supersample=2, split=(5, 1))
    return root, ds


# ---------------------------------------------------------------------------
# formats
# ---------------------------------------------------------------------------

def test_sinogram_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    sino = Sinogram(rng.random((7, 5)), table_hash=1234567)
    path = tmp_path / "a.sino"
    formats.write_sinogram(path, sino)
    back = formats.read_sinogram(path)
    assert np.array_equal(back.y, sino.y)
    assert back.table_hash == sino.table_hash


def test_imgpair_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    pair = ImagePair(rng.random((9, 9)), rng.random((9, 9)), BOUNDS)
    path = tmp_path / "a.imgpair"
    formats.write_imgpair(path, pair)
    back = formats.read_imgpair(path, BOUNDS)
    assert np.array_equal(back.emission, pair.emission)
    assert np.array_equal(back.attenuation, pair.attenuation)


def test_format_magic_rejected(tmp_path):
    bad = tmp_path / "bad.sino"
    bad.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(FormatError):
        formats.read_sinogram(bad)
    with pytest.raises(FormatError):
        formats.read_imgpair(bad)
    truncated = tmp_path / "trunc.imgpair"
    pair = ImagePair(np.zeros((5, 5)), np.zeros((5, 5)), BOUNDS)
    formats.write_imgpair(truncated, pair)
    data = truncated.read_bytes()
    truncated.write_bytes(data[:-9])
    with pytest.raises(FormatError):
        formats.read_imgpair(truncated)


def test_batch_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    samples = [(i, rng.random((2, 9, 9)), rng.random((2, 9, 9)), rng.random((2, 9, 9)))
               for i in range(3)]
    path = tmp_path / "b.pgtb"
    formats.write_batch(path, 2, 9, 777, False, BOUNDS, samples)
    batch = formats.read_batch(path)
    assert batch.k == 2 and batch.n_px == 9 and not batch.augmented
    assert batch.cfg_hash == 777
    assert np.array_equal(batch.sample_ids, np.arange(3))
    for i in range(3):
        assert np.array_equal(batch.u[i], samples[i][1])
        assert np.array_equal(batch.gt[i], samples[i][3])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_metrics_basic_cases():
    grid = geo.build_grid(9, 1.0)
    mask = geo.disk_mask(grid)
    rng = np.random.default_rng(3)
    truth = np.stack([rng.random((9, 9)) + 0.5, rng.random((9, 9)) + 0.5])
    m = compute_metrics(truth, truth, mask)
    assert m.rel_err_lambda == 0.0 and m.rel_err_mu == 0.0
    zero = compute_metrics(np.zeros_like(truth), truth, mask)
    assert zero.rel_err_lambda == pytest.approx(1.0)
    est = truth + rng.normal(0, 0.1, truth.shape)
    m2 = compute_metrics(est, truth, mask)
    ref = [np.linalg.norm((est[c] - truth[c])[mask]) / np.linalg.norm(truth[c][mask])
           for c in range(2)]
    assert m2.rel_err_lambda == pytest.approx(ref[0], rel=1e-14)
    assert m2.rel_err_mu == pytest.approx(ref[1], rel=1e-14)
    with pytest.raises(InvalidInputError):
        compute_metrics(truth, np.zeros_like(truth), mask)


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def test_render_black_white_and_deterministic(tmp_path):
    grid = geo.build_grid(9, 1.0)
    mask = geo.disk_mask(grid)
    dark = ImagePair(np.zeros((9, 9)), np.zeros((9, 9)), BOUNDS)
    lam_path, mu_path = render(dark, tmp_path / "dark")
    payload = lam_path.read_bytes()
    header_len = len(b"P5\n9 9\n255\n")
    assert set(payload[header_len:]) == {0}
    bright = ImagePair(np.where(mask, BOUNDS[0], 0.0), np.where(mask, BOUNDS[1], 0.0), BOUNDS)
    lam_path, _ = render(bright, tmp_path / "bright")
    pixels = np.frombuffer(lam_path.read_bytes()[header_len:], dtype=np.uint8).reshape(9, 9)
    assert np.all(pixels[mask] == 255)
    assert np.all(pixels[~mask] == 0)
    again, _ = render(bright, tmp_path / "bright2")
    assert again.read_bytes() == lam_path.read_bytes()


# ---------------------------------------------------------------------------
# dataset and batch pipeline
# ---------------------------------------------------------------------------

def test_export_batch_uses_initial_guess_and_train_split(dataset, tmp_path):
    root, ds = dataset
    job = default_job()
    job["grid"] = {"n_px": 33, "pixel_size": 5.0}
    job["detector"]["n_angles"] = 8
    job["solver"]["sgp_max_inner"] = 40
    job["init"] = "site"
    ctx = JobContext(job)
    out = tmp_path / "batch0.pgtb"
    export_training_batch(ds, 0, ctx, out)
    batch = formats.read_batch(out)
    assert len(batch.sample_ids) == len(ds.manifest.split_entries("train")) == 5
    assert not batch.augmented
    assert batch.cfg_hash == job_hash(job)
    u0 = sv.initial_guess(ctx.grid, ctx.assembly, ctx.constraints(), "site").stack()
    for i in range(len(batch.sample_ids)):
        assert np.array_equal(batch.u[i], u0)

    again = tmp_path / "batch0_again.pgtb"
    export_training_batch(ds, 0, ctx, again)
    assert out.read_bytes() == again.read_bytes()


def test_advance_with_zero_network_keeps_iterates(dataset, tmp_path):
    root, ds = dataset
    job = default_job()
    job["grid"] = {"n_px": 33, "pixel_size": 5.0}
    job["detector"]["n_angles"] = 8
    job["solver"]["sgp_max_inner"] = 40
    job["init"] = "site"
    ctx = JobContext(job)
    out = tmp_path / "b0.pgtb"
    export_training_batch(ds, 0, ctx, out)
    batch = formats.read_batch(out)
    advance_dataset(ds, out, zero_weights("cnn", BOUNDS, iteration=0), ctx)
    for i, sid in enumerate(batch.sample_ids):
        advanced = formats.read_imgpair(root / "iterates/k1" / f"s{sid:05d}.imgpair", BOUNDS)
        assert np.allclose(advanced.stack(), batch.u[i], atol=1e-6 * BOUNDS[0])


def test_advance_then_reexport_recomputes_steps(dataset, tmp_path):
    root, ds = dataset
    job = default_job()
    job["grid"] = {"n_px": 33, "pixel_size": 5.0}
    job["detector"]["n_angles"] = 8
    job["solver"]["sgp_max_inner"] = 40
    job["init"] = "site"
    ctx = JobContext(job)
    b0 = tmp_path / "b0.pgtb"
    export_training_batch(ds, 0, ctx, b0)
    store = init_weights("cnn", 55, BOUNDS, iteration=0, scale=0.05)
    advance_dataset(ds, b0, store, ctx)
    b1 = tmp_path / "b1.pgtb"
    export_training_batch(ds, 1, ctx, b1)
    batch1 = formats.read_batch(b1)
    # spot check the first sample against a manual pipeline
    entry = ds.manifest.split_entries("train")[0]
    y = ds.load_sinogram(entry)
    problem = sv.Problem(y, ctx.tables, ctx.regularization(y), ctx.constraints())
    cfg = ctx.solver_config()
    state_payload = json.loads((root / "iterates/k1" / f"s{entry.sample_id:05d}.state.json").read_text())
    u1 = formats.read_imgpair(root / "iterates/k1" / f"s{entry.sample_id:05d}.imgpair", BOUNDS)
    alphas = sv.decay_alpha(1, problem.reg)
    state = sv.initial_state(problem, u1.stack(), cfg, alphas)
    state = sv.replace_state(state, beta=state_payload["beta"], delta=state_payload["delta"],
                             alphas=alphas, k=1)
    prop, _ = sv.lm_step(state, problem, cfg)
    idx = int(np.nonzero(batch1.sample_ids == entry.sample_id)[0][0])
    assert np.array_equal(batch1.u[idx], u1.stack())
    assert np.allclose(batch1.s[idx], prop.step, rtol=1e-12, atol=1e-9)


# ---------------------------------------------------------------------------
# CLI end to end
# ---------------------------------------------------------------------------

def test_cli_gen_data_deterministic(tmp_path):
    args = ["gen-data", "--n-px", "33", "--pixel-size", "5.0", "--n-angles", "8",
            "--counts", "2,2,2", "--split", "5,1", "--seed", "9"]
    assert cli_main(args + ["--out", str(tmp_path / "d1")]) == 0
    assert cli_main(args + ["--out", str(tmp_path / "d2")]) == 0
    for rel in ["manifest.txt", "images/s00002.imgpair", "sinos/s00004.sino"]:
        assert (tmp_path / "d1" / rel).read_bytes() == (tmp_path / "d2" / rel).read_bytes()


def test_cli_reconstruct_eval_render(tmp_path, dataset):
    root, ds = dataset
    job_path, job = small_job(tmp_path)
    out = tmp_path / "rec"
    rc = cli_main([
        "reconstruct", "--job", str(job_path), "--sino", str(root / "sinos/s00000.sino"),
        "--out", str(out), "--truth", str(root / "images/s00000.imgpair"), "--render",
    ])
    assert rc == 0
    assert (out / "reconstruction.imgpair").exists()
    log = (out / "trajectory.log").read_text().splitlines()
    assert log[0].startswith("# k f rho beta delta alpha1 alpha2")
    assert len(log) == 1 + job["solver"]["iterations"]
    rc = cli_main(["eval", "--image", str(out / "reconstruction.imgpair"),
                   "--truth", str(root / "images/s00000.imgpair")])
    assert rc == 0
    assert (out / "reconstruction_emission.pgm").exists()


def test_cli_describe_weights(tmp_path, capsys):
    store = init_weights("fno", 4, BOUNDS)
    path = tmp_path / "w.pgwt"
    store.save(path)
    assert cli_main(["describe-weights", "--weights", str(path)]) == 0
    out = capsys.readouterr().out
    assert "parameters: 30532" in out
    assert "architecture: fno" in out


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.sino"
    bad.write_bytes(b"JUNKJUNKJUNK")
    rc = cli_main(["reconstruct", "--sino", str(bad), "--out", str(tmp_path / "o"),
                   "--n-px", "33", "--pixel-size", "5.0", "--n-angles", "8"])
    assert rc == 4
    rc = cli_main(["eval", "--image", str(tmp_path / "missing.imgpair"),
                   "--truth", str(tmp_path / "missing.imgpair")])
    assert rc == 2


def test_console_script_installed():
    exe = shutil.which("pget")
    assert exe, "pget console script should be installed"
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "reconstruct" in proc.stdout
