from pathlib import Path

import numpy as np
import pytest

from pget_recon import phantom as ph
from pget_recon.errors import InvalidInputError
from pget_recon.geometry import build_grid, default_detector, disk_mask

GRID = build_grid(165, 1.0)
SPEC = ph.AssemblySpec()


def test_standard_full_branch_counts():
    asm = ph.sample_assembly(SPEC, "standard", 7, branch="full")
    assert asm.count("present") == 81
    assert asm.count("missing") == 0 and asm.count("replaced") == 0


def test_standard_missing_and_replaced_ranges():
    for seed in range(40):
        missing = ph.sample_assembly(SPEC, "standard", seed, branch="missing")
        assert 1 <= missing.count("missing") <= 6
        assert missing.count("replaced") == 0
        replaced = ph.sample_assembly(SPEC, "standard", seed, branch="replaced")
        assert 5 <= replaced.count("replaced") <= 6
        assert replaced.count("missing") == 0


def test_standard_value_ranges():
    asm = ph.sample_assembly(SPEC, "standard", 3, branch="replaced")
    for rod in asm.rods:
        if rod.state == "present":
            assert SPEC.emission_range[0] <= rod.emission <= SPEC.emission_range[1]
            assert SPEC.attenuation_range[0] <= rod.attenuation <= SPEC.attenuation_range[1]
        elif rod.state == "missing":
            assert rod.emission == 0.0 and rod.attenuation == SPEC.water_attenuation
        else:
            assert rod.emission == 0.0
            assert SPEC.attenuation_range[0] <= rod.attenuation <= SPEC.attenuation_range[1]


def test_medium_tier_seventy_percent_floors():
    lo_e, lo_a = np.inf, np.inf
    n_disturbed = []
    for seed in range(1000):
        asm = ph.sample_assembly(SPEC, "medium", 5000 + seed)
        n_disturbed.append(81 - asm.count("present"))
        for rod in asm.rods:
            if rod.state == "present":
                lo_e = min(lo_e, rod.emission)
            elif rod.state == "replaced":
                lo_a = min(lo_a, rod.attenuation)
    assert lo_e >= 0.70 * SPEC.emission_range[1]
    assert lo_a >= 0.70 * SPEC.attenuation_range[1]
    assert min(n_disturbed) >= 1 and max(n_disturbed) <= 20


def test_zero_jitter_gives_perfect_lattice():
    spec = ph.AssemblySpec(position_jitter_sigma=0.0)
    asm = ph.sample_assembly(spec, "standard", 9, branch="full")
    nominal = spec.lattice_centers()
    got = np.array([rod.center for rod in asm.rods])
    assert np.allclose(got, nominal)


def test_unknown_tier_rejected():
    with pytest.raises(InvalidInputError):
        ph.sample_assembly(SPEC, "nightmare", 0)
    with pytest.raises(InvalidInputError):
        ph.sample_assembly(SPEC, "extreme", 0)
    with pytest.raises(InvalidInputError):
        ph.sample_assembly(SPEC, "standard", 0, branch="granola")


def test_extreme_configs_load_and_rasterize():
    assemblies = ph.load_extreme_assemblies(SPEC)
    assert len(assemblies) == 4
    for asm in assemblies:
        pair = ph.rasterize(asm, GRID, 2)
        assert np.isfinite(pair.emission).all()


def test_rasterize_empty_assembly_is_water_disk():
    pair = ph.rasterize(ph.Assembly(spec=SPEC, rods=[]), GRID, 2)
    inside = disk_mask(GRID)
    assert np.all(pair.emission == 0.0)
    assert np.all(pair.attenuation[~inside] == 0.0)
    # interior pixels away from the boundary carry exactly the water value
    core = np.zeros_like(inside)
    core[60:100, 60:100] = True
    assert np.allclose(pair.attenuation[core], SPEC.water_attenuation)


def test_rasterize_area_oracle():
    asm = ph.sample_assembly(SPEC, "standard", 7, branch="full")
    pair = ph.rasterize(asm, GRID, 2)
    total = pair.emission.sum() * GRID.pixel_size**2
    expected = sum(r.emission * np.pi * SPEC.rod_radius**2 for r in asm.rods
                   if r.state == "present")
    assert abs(total - expected) / expected <= 0.02


def test_rasterize_supersample_interior_agreement():
    asm = ph.sample_assembly(SPEC, "standard", 11, branch="full")
    p1 = ph.rasterize(asm, GRID, 1)
    p4 = ph.rasterize(asm, GRID, 4)
    coords = GRID.centers()
    X, Y = np.meshgrid(coords, coords, indexing="xy")
    margin = GRID.pixel_size * np.sqrt(2.0)
    strict_rod = np.zeros_like(X, dtype=bool)
    near_rod = np.zeros_like(X, dtype=bool)
    for rod in asm.rods:
        d = np.hypot(X - rod.center[0], Y - rod.center[1])
        if rod.state == "present":
            strict_rod |= d <= SPEC.rod_radius - margin
        near_rod |= d <= SPEC.rod_radius + margin
    interior_water = disk_mask(GRID) & ~near_rod
    interior_water &= np.hypot(X, Y) <= GRID.r_domain - 3 * GRID.pixel_size
    assert np.array_equal(p1.emission[strict_rod], p4.emission[strict_rod])
    assert np.array_equal(p1.attenuation[interior_water], p4.attenuation[interior_water])


def test_rasterize_rejects_out_of_disk_rods():
    rods = [{"center": [80.0, 20.0], "state": "present", "emission": 7e5,
             "attenuation": 0.13}]
    asm = ph.assembly_from_rods(SPEC, rods)
    with pytest.raises(InvalidInputError):
        ph.rasterize(asm, GRID, 2)


def test_random_rotation_pair_support_and_shared_angle():
    grid = build_grid(33, 5.0)
    # registration marker: single bright off-center pixel in every channel
    marker = np.zeros((33, 33))
    marker[10, 22] = 1.0
    inputs = np.stack([marker, marker * 2.0, marker * 3.0, marker * 0.5])
    target = ph.ImagePair(marker * 4.0, marker * 5.0, (1.0, 1.0))
    for seed in range(25):
        rot_in, rot_t, phi = ph.random_rotation_pair(inputs, target, seed)
        assert abs(phi) <= np.deg2rad(5.0) + 1e-15
        # identical angle on every channel: rotated markers stay proportional
        base = rot_in[0]
        assert np.allclose(rot_in[1], 2.0 * base, atol=1e-12)
        assert np.allclose(rot_t.emission, 4.0 * base, atol=1e-12)
        assert np.allclose(rot_t.attenuation, 5.0 * base, atol=1e-12)


def test_random_rotation_zero_angle_identity():
    rng = np.random.default_rng(0)
    img = rng.random((17, 17))
    inputs = np.stack([img, img])
    target = ph.ImagePair(img, img, (1.0, 1.0))
    rot_in, rot_t, phi = ph.random_rotation_pair(inputs, target, 3, max_deg=0.0)
    assert phi == 0.0
    assert np.array_equal(rot_in[0], img)
    assert np.array_equal(rot_t.emission, img)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    grid = build_grid(33, 5.0)
    det = default_detector(grid, n_angles=8)
    plan = [("standard", "full", 3), ("standard", "missing", 4), ("standard", "replaced", 3)]
    ds = ph.build_dataset(root, SPEC, grid, det, plan=plan, master_seed=11,
                          noise_level=0.02, supersample=2, split=(8, 2))
    return root, ds


def test_dataset_counts_split_and_meta(tiny_dataset):
    root, ds = tiny_dataset
    assert len(ds.entries) == 10
    branches = [e.branch for e in ds.entries]
    assert branches.count("full") == 3
    assert branches.count("missing") == 4
    assert branches.count("replaced") == 3
    assert len(ds.manifest.split_entries("train")) == 8
    assert len(ds.manifest.split_entries("val")) == 2
    assert ds.meta("noise_level", float) == 0.02
    assert ds.meta("water_attenuation", float) == 0.0085


def test_dataset_reproducible_bytes(tiny_dataset, tmp_path):
    root, ds = tiny_dataset
    grid = build_grid(33, 5.0)
    det = default_detector(grid, n_angles=8)
    plan = [("standard", "full", 3), ("standard", "missing", 4), ("standard", "replaced", 3)]
    other = tmp_path / "again"
    ph.build_dataset(other, SPEC, grid, det, plan=plan, master_seed=11,
                     noise_level=0.02, supersample=2, split=(8, 2))
    for rel in ["manifest.txt", "images/s00003.imgpair", "sinos/s00007.sino"]:
        assert (Path(root) / rel).read_bytes() == (other / rel).read_bytes()


def test_dataset_values_within_ranges(tiny_dataset):
    root, ds = tiny_dataset
    for entry in ds.entries[:4]:
        pair = ds.load_truth(entry)
        assert pair.emission.max() <= SPEC.emission_range[1] + 1e-9
        rod_level = pair.emission[pair.emission > 0.9 * SPEC.emission_range[0]]
        if rod_level.size:
            assert rod_level.min() >= SPEC.emission_range[0] * 0.9


def test_assembly_spec_validation():
    with pytest.raises(InvalidInputError):
        ph.AssemblySpec(emission_range=(7e5, 6.5e5))
    with pytest.raises(InvalidInputError):
        ph.AssemblySpec(rod_pitch=-1.0)
    small = build_grid(33, 1.0)  # 33 mm disk cannot host the lattice
    with pytest.raises(InvalidInputError):
        SPEC.validate_grid(small)
