"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Criteria 4 to 8 train real reconstructions and are marked slow; criterion 4
alone trains for about 20 minutes on one core.
"""

import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from octomo import autodiff, baselines, kernels
from octomo.calib import calibration_report
from octomo.cli import synthesize
from octomo.config import RunConfig
from octomo.data import TRAIN
from octomo.errors import ConfigurationError
from octomo.field import Decoder, FeatureVolumes, gather, gather_samples
from octomo.geometry import Geometry, fit_intrinsics, intersect_aabb_batch, make_circular_trajectory
from octomo.losses import boundary_points
from octomo.metrics import evaluate_reconstruction
from octomo.octree import SparseOctree
from octomo.refine import plan_tree
from octomo.render import RadiometricModel
from octomo.sampler import STRATIFIED, UNIFORM, build_samples, delta_weights, place_samples
from octomo.scene import Scene, pixel_grid
from octomo.train import Reconstructor, reconstruct

from conftest import enumerate_configurations, make_tiny_scene, random_rays, random_small_tree, small_config

slow = pytest.mark.slow


def load(preset, *overrides):
    return RunConfig.load(preset=preset, overrides=list(overrides))


def variant(cfg, **changes):
    """Copy of ``cfg`` with ``section__key=value`` changes."""
    out = RunConfig.from_dict(cfg.to_dict())
    for name, value in changes.items():
        section, key = name.split("__")
        out.set(section, key, value)
    return out.validate()


# -- 1. quadrature ------------------------------------------------------------

def test_criterion_1_quadrature(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    tree = SparseOctree.build_uniform(3)
    o, d = random_rays(rng, 12_000)
    worst, n_seg, ks = 0.0, 0, set()
    for mode in (UNIFORM, STRATIFIED):
        b = build_samples(tree, o, d, 16, mode, seed=1)
        per_seg = np.bincount(b.seg, weights=b.delta, minlength=len(b.seg_t0))
        worst = max(worst, float(np.max(np.abs(per_seg - (b.seg_t1 - b.seg_t0)))))
        n_seg += len(b.seg_t0)
        ks.update(np.unique(np.bincount(b.seg, minlength=len(b.seg_t0))).tolist())
    # every k from 1 to N directly, on random segments
    for k in range(1, 17):
        for j in range(100):
            a, ext = rng.uniform(-3, 3), rng.uniform(1e-4, 2.0)
            ts = place_samples(a, a + ext, k, STRATIFIED if j % 2 else UNIFORM, key=j)
            worst = max(worst, abs(float(delta_weights(ts, a, a + ext).sum()) - ext))
    exact = 1 - math.cos(1.0)
    errs = []
    for k in (8, 16, 32):
        t = place_samples(0.0, 1.0, k)
        errs.append(abs(float(np.sum(np.sin(t) * delta_weights(t, 0.0, 1.0))) - exact))
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    secs = time.perf_counter() - start
    ok = (worst <= 1e-12 and n_seg >= 100_000 and ks >= set(range(1, 17))
          and all(3 <= r <= 5 for r in ratios) and secs < 5)
    acceptance(1, ok, f"{n_seg} segments, max |sum(delta) - extent| {worst:.1e}, "
                      f"midpoint ratios {ratios[0]:.3f} {ratios[1]:.3f}, {secs:.1f} s")
    assert ok


# -- 2. gradients -------------------------------------------------------------

def test_criterion_2_gradient_suite(acceptance):
    start = time.perf_counter()
    sc = make_tiny_scene()
    px = np.concatenate([pixel_grid((4, 4))] * 2)
    vid = np.repeat([0, 1], 16)
    tgt = np.random.default_rng(100).normal(0.3, 0.1, 32)

    def loss():
        t = autodiff.forward(sc, vid, px, tgt, mode="stratified", seed=1)
        return float(np.mean(t.residual ** 2)), t

    _, tape = loss()
    groups = ("features", "decoder", "poses", "exposure", "bias", "response", "background")
    grads = autodiff.zero_grads(sc)
    autodiff.backward(sc, tape, 2 * tape.residual / len(tgt), grads, enabled=groups)
    params = {("features", "features"): sc.volumes.data,
              ("poses", "rotation"): sc.geometry.delta_rot,
              ("poses", "translation"): sc.geometry.delta_trans}
    params.update({("decoder", k): v for k, v in sc.decoder.params.items()})
    params.update({("radiometry", k): v for k, v in sc.radiometry.arrays().items()})
    assert sc.volumes.data.dtype == np.float64
    h = 1e-6
    errors = {}
    for (group, key), arr in params.items():
        flat = arr.reshape(-1)
        an = grads[group][key].reshape(-1)
        rng = np.random.default_rng(sum(map(ord, key)))
        idx = np.unique(np.concatenate([np.argsort(-np.abs(an))[:6],
                                        rng.choice(flat.size, min(10, flat.size), replace=False)]))
        fd = np.zeros(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up, _ = loss()
            flat[i] = old - h
            dn, _ = loss()
            flat[i] = old
            fd[n] = (up - dn) / (2 * h)
        errors[key] = float(np.linalg.norm(fd - an[idx]) / np.linalg.norm(fd))
    secs = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values()) and secs < 30
    acceptance(2, ok, f"{len(errors)} parameter arrays, worst relative error {errors[worst]:.1e} ({worst}), "
                      f"{secs:.1f} s")
    assert ok


# -- 3. oracle separations ----------------------------------------------------

def naive_gather_same_order(data, slots, local):
    """Per-sample trilinear lookup with the same operation order as the kernels."""
    G, F = data.shape[1], data.shape[-1]
    out = np.zeros((len(slots), F))
    for n in range(len(slots)):
        s = int(slots[n])
        i0, w = [], []
        for a in range(3):
            g = float(local[n, a]) * (G - 1)
            i = min(max(math.floor(g), 0), G - 2)
            i0.append(i)
            w.append(g - i)
        acc = np.zeros(F)
        for dx in (0, 1):
            fx = w[0] if dx else 1.0 - w[0]
            for dy in (0, 1):
                fy = w[1] if dy else 1.0 - w[1]
                for dz in (0, 1):
                    fz = w[2] if dz else 1.0 - w[2]
                    acc += (fx * fy * fz) * data[s, i0[0] + dx, i0[1] + dy, i0[2] + dz]
        out[n] = acc
    return out


def test_criterion_3_oracle_separations(acceptance):
    rng = np.random.default_rng(3)
    # (a) samples spread over leaves of three different depths
    tree = SparseOctree.build_uniform(1)
    for leaf in tree.leaves()[:3]:
        kids = tree.split(leaf)
        tree.split(kids[5])
    tree.assign_slots()
    vol = FeatureVolumes.initialize(tree.n_slots, 5, 8, rng, std=1.0)
    o, d = random_rays(rng, 1500)
    batch = build_samples(tree, o, d, 16, STRATIFIED, seed=2)
    n = 10_000
    assert batch.n_samples >= n
    nodes = batch.node[:n]
    slots, local = tree.slot[nodes], batch.local[:n]
    expect = naive_gather_same_order(vol.data, slots, local)
    depths = np.unique(tree.depth[nodes])
    gather_ok = all(np.array_equal(gather(vol, slots, local, b), expect) for b in kernels.backends().values())
    gather_ok &= np.array_equal(gather_samples(batch, tree, vol)[:n], expect) and len(depths) == 3

    # (b) planner against exhaustive enumeration on 100 random tables
    plan_ok = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        t = random_small_tree(r, max_depth=2)
        errors = r.exponential(1.0, t.n_nodes)
        T_max, alpha, depth_max = int(r.integers(1, 17)), float(r.choice([0.0, 0.25, 0.6])), int(r.integers(1, 4))
        configs = enumerate_configurations(t, errors, T_max, alpha, depth_max)
        if not configs:
            try:
                plan_tree(t, errors, T_max, alpha, depth_max)
            except ConfigurationError:
                plan_ok += 1
            continue
        best = min(e for _, e in configs)
        plan = plan_tree(t, errors, T_max, alpha, depth_max)
        plan_ok += bool(abs(plan.predicted_error - best) <= 1e-9 * max(best, 1e-300) and plan.n_leaves <= T_max)

    # (c) single leaf of constant density against analytic chords
    sigma = 1.7
    leaf = SparseOctree.build_uniform(0)
    geo = Geometry(make_circular_trajectory(3, 2 * np.pi, 2.0, start_angle=0.4), fit_intrinsics(12, 12, 2.0))
    sc = Scene(leaf, FeatureVolumes(np.full((1, 2, 2, 2, 1), np.log(np.expm1(sigma)))), Decoder.identity(), geo,
               RadiometricModel(3, (12, 12)), n_samples=16)
    worst_rel, misses_zero = 0.0, True
    px = pixel_grid((12, 12))
    for v in range(3):
        ro, rd, _ = geo.rays(np.full(len(px), v), px)
        tn, tf = intersect_aabb_batch(ro, rd / np.linalg.norm(rd, axis=1, keepdims=True))
        chord = np.maximum(tf - tn, 0.0)
        img = sc.render_view(v, radiometry=False).ravel()
        hit = chord > 0
        worst_rel = max(worst_rel, float(np.max(np.abs(img[hit] - sigma * chord[hit]) / (sigma * chord[hit]))))
        misses_zero &= bool(np.all(img[~hit] == 0.0))
    ok = gather_ok and plan_ok == 100 and worst_rel <= 1e-6 and misses_zero
    acceptance(3, ok, f"(a) gather bit-identical on {n} samples over depths {depths.tolist()}: {gather_ok}; "
                      f"(b) planner optimal on {plan_ok}/100 tables; (c) chord relative error {worst_rel:.1e}")
    assert ok


# -- 4. desk-scale regression ---------------------------------------------------

# frozen from the first validated run of this configuration (see README)
C4_VOLUMETRIC_THRESHOLD_DB = 36.0
DESK = ["data.phantom=blobs", "data.resolution=64", "data.detector_width=128", "data.detector_height=128",
        "data.noise_sigma_rel=0.02", "model.n_samples=16", "model.grid=9", "model.features=8",
        "refine.max_leaves=512", "train.epochs=40", "train.batch_rays=16384"]


def desk_run(preset, no_decoder=False):
    cfg = load(preset, *DESK)
    if no_decoder:
        cfg = baselines.no_decoder_config(cfg)
    vol, ds = synthesize(cfg)
    start = time.perf_counter()
    rec = reconstruct(cfg, ds)
    secs = time.perf_counter() - start
    return evaluate_reconstruction(rec.scene, ds, vol), secs


@slow
def test_criterion_4_desk_scale_regression(acceptance):
    full, secs = desk_run("full")
    limited, _ = desk_run("limited_angle")
    plain, _ = desk_run("limited_angle", no_decoder=True)
    margin = limited.volumetric_psnr - plain.volumetric_psnr
    threshold = C4_VOLUMETRIC_THRESHOLD_DB
    quality = threshold is not None and full.volumetric_psnr >= threshold
    ok = quality and margin >= 0.5 and secs < 15 * 60
    acceptance(4, ok, f"volumetric {full.volumetric_psnr:.2f} dB (threshold {threshold}), "
                      f"limited angle {limited.volumetric_psnr:.2f} vs no decoder {plain.volumetric_psnr:.2f} "
                      f"(+{margin:.2f} dB), training {secs / 60:.1f} min (target 15)")
    assert quality and margin >= 0.5
    assert secs < 15 * 60


# -- 5 to 8: reduced-scale experiments ------------------------------------------

REDUCED = ["data.resolution=32", "data.detector_width=64", "data.detector_height=64", "model.grid=9",
           "refine.enabled=false"]


@slow
def test_criterion_5_tv_trend(acceptance):
    cfg = load("sparse_view", *REDUCED, "train.epochs=20")
    vol, ds = synthesize(cfg)
    lams = (0.0, 2e-5, 1e-4, 2.5e-4, 5e-4)
    train, gap = [], []
    for lam in lams:
        rep = evaluate_reconstruction(reconstruct(variant(cfg, loss__lambda_tv=lam), ds).scene, ds, vol)
        train.append(rep.train_psnr)
        gap.append(rep.train_psnr - rep.test_psnr)
    monotone = all(b <= a for a, b in zip(train, train[1:]))
    ok = monotone and gap[1] < gap[0]
    acceptance(5, ok, "train PSNR " + " ".join(f"{p:.4f}" for p in train)
               + f"; train-test gap {gap[0]:.4f} at 0 vs {gap[1]:.4f} at 2e-5")
    assert ok


def mean_face_jump(scene):
    tree = scene.tree
    a, b, la, lb = boundary_points(tree, tree.neighbor_pairs())
    fa = gather(scene.volumes, tree.slot[a], la)
    fb = gather(scene.volumes, tree.slot[b], lb)
    return float(np.mean(np.abs(scene.decoder.decode(fa) - scene.decoder.decode(fb))))


@slow
def test_criterion_6_boundary_consistency(acceptance):
    cfg = load("sparse_view", *REDUCED, "model.init_depth=2", "train.epochs=20")
    _, ds = synthesize(cfg)
    off = mean_face_jump(reconstruct(variant(cfg, loss__lambda_bc=0.0), ds).scene)
    on = mean_face_jump(reconstruct(variant(cfg, loss__lambda_bc=0.01), ds).scene)
    ok = off >= 5 * on
    acceptance(6, ok, f"mean face jump {off:.5f} without vs {on:.5f} with the regularizer ({off / on:.1f}x)")
    assert ok


@slow
def test_criterion_7_geometric_self_calibration(acceptance):
    cfg = load("sparse_view", *REDUCED, "train.epochs=40", "train.lr_poses=3e-5")
    vol, ds = synthesize(cfg)
    noise = dict(calib__pose_noise_rot=math.radians(0.5), calib__pose_noise_trans=0.01 * cfg.values["data"]["radius"])
    out = {}
    for name, c in (("clean", cfg), ("noisy", variant(cfg, **noise)),
                    ("calibrated", variant(cfg, calib__geometric=True, **noise))):
        rec = Reconstructor(c, ds)
        rec.fit()
        out[name] = (evaluate_reconstruction(rec.scene, ds, vol).test_psnr,
                     calibration_report(rec.scene.geometry, ds.poses, views=ds.views(TRAIN),
                                        before=rec.initial_poses))
    clean, noisy, cal = out["clean"][0], out["noisy"][0], out["calibrated"][0]
    rep = out["calibrated"][1]
    before, after = rep["initial_median_reprojection_error_px"], rep["median_reprojection_error_px"]
    ok = noisy < clean and cal >= clean - 1.0 and after < 0.5 * before
    acceptance(7, ok, f"test PSNR clean {clean:.2f}, noisy {noisy:.2f}, calibrated {cal:.2f}; "
                      f"median reprojection error {before:.3f} -> {after:.3f} px "
                      f"(rotation {rep['initial_median_rotation_error_deg']:.3f} -> "
                      f"{rep['median_rotation_error_deg']:.3f} deg)")
    assert ok


@slow
def test_criterion_8_structure_refinement(acceptance):
    cfg = load("sparse_view", "data.phantom=box_octant", "data.resolution=32", "data.detector_width=64",
               "data.detector_height=64", "model.grid=9", "model.init_depth=2", "refine.max_leaves=1024",
               "refine.milestones=8,16", "refine.tau_rel=0.1", "train.epochs=24")
    vol, ds = synthesize(cfg)
    runs = {}
    for cull in (True, False):
        rec = Reconstructor(variant(cfg, refine__cull=cull), ds)
        rec.fit()
        events = [r["refinement"] for r in rec.records if r["refinement"]]
        runs[cull] = (rec, events, evaluate_reconstruction(rec.scene, ds, vol).test_psnr)
    (culled, ev_c, psnr_c), (plain, ev_p, psnr_p) = runs[True], runs[False]
    first = ev_p[0]
    first_ok = (first["leaves_before"] == 64 and first["split"] == 64 and first["leaves_after"] == 512
                and ev_c[0]["split"] == 64 and ev_c[0]["leaves_after"] + ev_c[0]["culled"] == 512)
    tree = culled.scene.tree
    leaves = tree.active_leaves()
    occupied = float(np.mean(np.all(tree.box_min[leaves] >= 0.0, axis=1)))
    ratio = culled.records[-1]["samples"] / plain.records[-1]["samples"]
    ok = first_ok and len(ev_p) >= 2 and occupied >= 0.6 and ratio <= 0.5 and abs(psnr_c - psnr_p) < 0.1
    acceptance(8, ok, f"first refinement {first['leaves_before']} -> {first['leaves_after']} leaves; "
                      f"{occupied:.0%} of {len(leaves)} active leaves in the occupied octant; "
                      f"culling keeps {ratio:.0%} of samples per epoch, test PSNR {psnr_c:.3f} vs {psnr_p:.3f}")
    assert ok


# -- 9. determinism -----------------------------------------------------------

def test_criterion_9_determinism(acceptance, tmp_path):
    cfg = small_config("train.epochs=3", "refine.enabled=true", "refine.milestones=2", "calib.exposure=true")
    _, ds = synthesize(cfg)
    blobs = []
    for name in ("a", "b"):
        rec = Reconstructor(cfg, ds)
        rec.fit()
        rec.save(tmp_path / f"{name}.ckpt")
        blobs.append((tmp_path / f"{name}.ckpt").read_bytes())
    same_ckpt = blobs[0] == blobs[1]
    scene = rec.scene
    images = []
    for threads in (1, 4):
        with threadpool_limits(threads):
            images.append(np.stack([scene.render_view(v) for v in range(ds.n_views)]))
    same_render = np.array_equal(images[0], images[1])
    ok = same_ckpt and same_render
    acceptance(9, ok, f"checkpoints byte-identical: {same_ckpt}; renders identical at 1 and 4 threads: "
                      f"{same_render}")
    assert ok
