import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octomo.cli import synthesize
from octomo.data import (BLOBS, BOX_OCTANT, NESTED_SHELLS, SHEPP_LOGAN_3D, TEST, TRAIN, load_dataset,
                         load_volume, make_phantom, project, read_container, save_dataset, save_volume,
                         split_views, synthesize_projections, write_container)
from octomo.data.phantoms import shepp_logan_value
from octomo.errors import ConfigurationError, FormatError, InputError
from octomo.geometry import Geometry, fit_intrinsics, intersect_aabb_batch, make_circular_trajectory
from octomo.scene import pixel_grid
from octomo.train import Reconstructor

from conftest import small_config


def trajectory(n_views=6, det=9, arc=np.pi):
    intr = fit_intrinsics(det, det, 2.0)
    return make_circular_trajectory(n_views, arc, 2.0, intr, 0.3), intr


# -- phantoms -----------------------------------------------------------------

def test_box_octant_voxel_count():
    for n in (8, 16, 32):
        data = make_phantom(BOX_OCTANT, n).data
        assert np.count_nonzero(data) == n ** 3 // 8
        assert np.all(data[n // 2:, n // 2:, n // 2:] == 1.0)


def test_phantoms_seeded_and_valid():
    for kind in (SHEPP_LOGAN_3D, BLOBS, BOX_OCTANT, NESTED_SHELLS):
        a, b = make_phantom(kind, 16, seed=4), make_phantom(kind, 16, seed=4)
        assert np.array_equal(a.data, b.data)
        assert np.all(a.data >= 0) and a.data.max() > 0
    assert not np.array_equal(make_phantom(BLOBS, 16, 1).data, make_phantom(BLOBS, 16, 2).data)
    with pytest.raises(ConfigurationError):
        make_phantom("cow", 16)
    with pytest.raises(InputError):
        make_phantom(BLOBS, 4)


# values worked out by hand from the published ellipsoid table: at each centre,
# sum the amplitudes of every ellipsoid that contains it
SHEPP_LOGAN_CENTRES = [
    ((0.0, 0.0, 0.5), 0.2),        # brain matter away from features: 1 - 0.8
    ((0.22, 0.0, 0.0), 0.0),       # right ventricle: 1 - 0.8 - 0.2
    ((-0.22, 0.0, 0.0), 0.0),      # left ventricle
    ((0.0, 0.35, -0.15), 0.3),     # 1 - 0.8 + 0.1
    ((0.0, 0.1, 0.25), 0.3),
    ((0.0, -0.1, 0.25), 0.3),
    ((-0.08, -0.605, 0.0), 0.3),
    ((0.0, -0.606, 0.0), 0.3),
    ((0.06, -0.605, 0.0), 0.3),
    ((0.0, 0.0, 0.9), 0.0),        # outside the skull
]


def test_shepp_logan_values_at_ellipsoid_centres():
    pts = np.array([p for p, _ in SHEPP_LOGAN_CENTRES])
    assert np.allclose(shepp_logan_value(pts), [v for _, v in SHEPP_LOGAN_CENTRES], atol=1e-12)
    # the voxelized phantom agrees at the voxel nearest each large feature
    n = 64
    vol = make_phantom(SHEPP_LOGAN_3D, n).data
    for p, v in SHEPP_LOGAN_CENTRES[:4]:
        idx = tuple(np.clip(np.floor((np.array(p) / 2 + 0.5) * n).astype(int), 0, n - 1))
        assert vol[idx] == pytest.approx(v, abs=1e-12)


# -- synthesis ----------------------------------------------------------------

def test_zero_volume_gives_zero_images():
    poses, intr = trajectory()
    ds = synthesize_projections(np.zeros((16, 16, 16)), poses, intr)
    assert ds.images.shape == (6, 9, 9) and not ds.images.any()


def test_constant_cube_centre_pixel_matches_chord():
    poses, intr = trajectory()
    ds = synthesize_projections(np.full((32, 32, 32), 2.0), poses, intr, noise_sigma_rel=0.0)
    geo = Geometry(poses, intr)
    px = pixel_grid(intr.shape)
    for v in range(len(poses)):
        o, d, _ = geo.rays(np.full(len(px), v), px)
        tn, tf = intersect_aabb_batch(o, d / np.linalg.norm(d, axis=1, keepdims=True))
        chord = (tf - tn)[4 * 9 + 4]
        assert ds.images[v, 4, 4] == pytest.approx(2.0 * chord, rel=1e-3)


def test_noise_level_relative_to_peak():
    poses, intr = trajectory(30, det=16)
    vol = make_phantom(BLOBS, 24, seed=1)
    clean = synthesize_projections(vol, poses, intr, noise_sigma_rel=0.0)
    noisy = synthesize_projections(vol, poses, intr, seed=5)
    assert noisy.provenance["noise_sigma_rel"] == 0.02
    sigma = 0.02 * clean.images.max()
    assert noisy.provenance["noise_sigma"] == pytest.approx(sigma, rel=1e-6)
    assert np.std(noisy.images - clean.images) == pytest.approx(sigma, rel=0.05)
    again = synthesize_projections(vol, poses, intr, seed=5)
    assert np.array_equal(noisy.images, again.images)
    with pytest.raises(InputError):
        synthesize_projections(vol, poses, intr, noise_sigma_rel=-0.1)


def test_halving_march_step_barely_changes_images():
    poses, intr = trajectory(4, det=16)
    vol = make_phantom(BLOBS, 32, seed=2).data
    geo = Geometry(poses, intr)
    a = project(vol, geo)
    b = project(vol, geo, step=0.25 / 32)
    assert np.sqrt(np.mean((a - b) ** 2)) <= 5e-4 * np.sqrt(np.mean(b ** 2))


# -- splits -------------------------------------------------------------------

def dataset(n_views, det=4):
    poses, intr = trajectory(n_views, det=det, arc=2 * np.pi)
    return synthesize_projections(np.zeros((8, 8, 8)), poses, intr, noise_sigma_rel=0.0)


def test_zero_test_fraction_is_all_train():
    ds = split_views(dataset(10), 0.0)
    assert np.all(ds.split == TRAIN)


def test_test_views_are_interleaved():
    ds = split_views(dataset(50), 0.2, seed=3)
    test = ds.views(TEST)
    assert len(test) == 10
    # the trajectory is in angle order, so test views sit one per block of five
    assert np.array_equal(np.sort(test // 5), np.arange(10))
    assert np.array_equal(split_views(dataset(50), 0.2, seed=3).split, ds.split)
    with pytest.raises(InputError):
        split_views(ds, 1.0)


@given(st.integers(2, 80), st.floats(0.0, 0.9), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_split_labels_every_view_once(n, frac, seed):
    ds = split_views(dataset(n, det=2), frac, seed)
    assert len(ds.split) == n
    assert len(ds.views(TEST)) == int(round(frac * n))
    assert len(ds.views(TRAIN)) + len(ds.views(TEST)) == n


# -- file formats -------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    poses, intr = trajectory(5, det=7)
    ds = split_views(synthesize_projections(make_phantom(BLOBS, 16, 3), poses, intr, seed=1), 0.4)
    path = tmp_path / "ds"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.split, ds.split)
    assert back.intrinsics == ds.intrinsics
    for p, q in zip(back.poses, ds.poses):
        assert np.array_equal(p.rotation, q.rotation) and np.array_equal(p.source_position, q.source_position)
    assert back.provenance == ds.provenance
    assert sorted(os.listdir(path)) == ["dataset.json"] + [f"view_{i:04d}.f32" for i in range(5)]


def test_dataset_damage_is_reported(tmp_path):
    poses, intr = trajectory(3, det=4)
    ds = synthesize_projections(np.zeros((8, 8, 8)), poses, intr)
    path = tmp_path / "ds"
    save_dataset(path, ds)
    with open(path / "view_0001.f32", "r+b") as fh:
        fh.truncate(10)
    with pytest.raises(FormatError):
        load_dataset(path)
    save_dataset(path, ds)
    meta = json.loads((path / "dataset.json").read_text())
    meta["version"] = 99
    (path / "dataset.json").write_text(json.dumps(meta))
    with pytest.raises(FormatError):
        load_dataset(path)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_volume_round_trip_and_damage(tmp_path):
    data = np.random.default_rng(0).uniform(size=(5, 6, 7)).astype(np.float32)
    p = tmp_path / "v.vol"
    save_volume(p, data, phantom="x")
    back, header = load_volume(p)
    assert back.dtype == np.float32 and np.array_equal(back, data)
    assert header["phantom"] == "x" and header["shape"] == [5, 6, 7]
    raw = p.read_bytes()
    p.write_bytes(raw[:-9])
    with pytest.raises(FormatError):
        load_volume(p)
    bad = bytearray(raw)
    bad[40] ^= 0xFF
    p.write_bytes(bytes(bad))
    with pytest.raises(FormatError):
        load_volume(p)


def test_container_round_trip_and_damage(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {"a": rng.normal(size=(3, 4)), "b": np.arange(5, dtype=np.int32), "c": np.zeros((0, 2))}
    p = tmp_path / "c.ckpt"
    write_container(p, arrays, {"k": [1, 2]})
    back, meta = read_container(p)
    assert meta == {"k": [1, 2]}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)
    raw = p.read_bytes()
    for damaged in (raw[:len(raw) // 2], raw[:-1], b"XXXX" + raw[4:]):
        p.write_bytes(damaged)
        with pytest.raises(FormatError):
            read_container(p)


def test_failed_write_leaves_previous_file(tmp_path):
    p = tmp_path / "c.ckpt"
    write_container(p, {"a": np.ones(3)}, {})
    before = p.read_bytes()
    with pytest.raises(TypeError):
        write_container(p, {"a": np.ones(3)}, {"bad": object()})
    assert p.read_bytes() == before
    assert sorted(os.listdir(tmp_path)) == ["c.ckpt"]


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_is_exact(tmp_path):
    cfg = small_config("train.epochs=2")
    _, ds = synthesize(cfg)
    rec = Reconstructor(cfg, ds)
    rec.fit()
    rec.save(tmp_path / "a.ckpt")
    back = Reconstructor.load(tmp_path / "a.ckpt", ds)
    a, b = rec.state_arrays(), back.state_arrays()
    assert sorted(a) == sorted(b)
    for k in a:
        assert np.array_equal(a[k], b[k]), k
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = small_config("train.epochs=3", "calib.geometric=true", "calib.exposure=true",
                       "calib.warmup_epochs=1", "calib.pose_noise_rot=0.01")
    _, ds = synthesize(cfg)
    full = Reconstructor(cfg, ds)
    full.fit()
    part = Reconstructor(cfg, ds)
    part.fit(2)
    part.save(tmp_path / "r.ckpt")
    resumed = Reconstructor.load(tmp_path / "r.ckpt", ds)
    resumed.fit()
    assert resumed.records[-1]["loss"] == full.records[-1]["loss"]
    assert np.array_equal(resumed.scene.volumes.data, full.scene.volumes.data)
