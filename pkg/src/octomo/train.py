"""Reconstruction driver: epochs of stratified ray batches, regularizers,
calibration unlocks, structure refinement and checkpoints.

Every random draw is a pure function of ``(train.seed, epoch, ...)``, so a
run resumed from a checkpoint continues exactly as if it had not stopped.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff, losses, refine
from .calib import CalibrationConfig, perturb_poses, rigid_gauge_component
from .config import RunConfig
from .data.dataset import TRAIN
from .data.io import read_container, write_container
from .errors import ConsistencyError, FormatError
from .field import Decoder, FeatureVolumes
from .geometry import Geometry, Intrinsics
from .metrics import evaluate_reconstruction, psnr_from_mse
from .octree import SparseOctree
from .optim import Adam, ParamGroup
from .render import RadiometricModel
from .scene import Scene, pixel_grid

CHECKPOINT_VERSION = 1


def calibration_config(cfg):
    c = cfg.values["calib"]
    return CalibrationConfig(
        geometric=c["geometric"], exposure=c["exposure"], bias=c["bias"], response=c["response"],
        background=c["background"], warmup_epochs=c["warmup_epochs"], pose_noise_rot=c["pose_noise_rot"],
        pose_noise_trans=c["pose_noise_trans"], pose_noise_seed=c["pose_noise_seed"],
    )


def loss_weights(cfg):
    c = cfg.values["loss"]
    return losses.LossWeights(c["lambda_tv"], c["lambda_bc"], c["tv_variant"])


def initial_scene(cfg, dataset, poses=None):
    """Freshly initialized scene for a dataset (``poses`` default to the dataset's)."""
    m = cfg.values["model"]
    cal = cfg.values["calib"]
    rng = np.random.default_rng(cfg.values["train"]["seed"])
    dtype = np.dtype(m["dtype"])
    tree = SparseOctree.build_uniform(m["init_depth"], m["max_depth"])
    volumes = FeatureVolumes.initialize(tree.n_slots, m["grid"], m["features"], rng, m["feature_std"],
                                        m["feature_mean"], dtype)
    if m["decoder"] == "identity":
        decoder = Decoder.identity()
    else:
        decoder = Decoder.mlp(m["features"], rng, m["hidden"], m["output_bias"], dtype)
    geometry = Geometry(dataset.poses if poses is None else poses, dataset.intrinsics)
    train = dataset.views(TRAIN)
    x_max = float(dataset.images[train].max()) if len(train) else 1.0
    rad = RadiometricModel(dataset.n_views, dataset.intrinsics.shape, x_max if x_max > 0 else 1.0,
                           cal["n_knots"], cal["background_res"], cal["per_view_background"])
    return Scene(tree, volumes, decoder, geometry, rad, m["n_samples"])


class Reconstructor:
    def __init__(self, cfg, dataset, scene=None, log=None):
        if not isinstance(cfg, RunConfig):
            raise TypeError("cfg must be a RunConfig")
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        self.calib = calibration_config(cfg)
        self.weights = loss_weights(cfg)
        self.log = log
        self.true_poses = dataset.poses
        if scene is None:
            poses = None
            if self.calib.pose_noise_rot > 0 or self.calib.pose_noise_trans > 0:
                # held-out views keep their poses: nothing in training could correct them
                poses = perturb_poses(dataset.poses, self.calib.pose_noise_rot, self.calib.pose_noise_trans,
                                      self.calib.pose_noise_seed, views=dataset.views(TRAIN))
            scene = initial_scene(cfg, dataset, poses)
        self.scene = scene
        self.initial_poses = scene.geometry.poses()
        self.epoch = 0
        self.history = []  # epoch losses since the last refinement
        self.records = []
        self.leaf_history = [len(scene.tree.active_leaves())]
        self.n_refinements = 0
        self.table = refine.NodeErrorTable(scene.tree.n_nodes)
        self._bc_points = None

        self.train_views = dataset.views(TRAIN)
        px = pixel_grid(dataset.intrinsics.shape)
        self._px = px
        self._n_px = len(px)
        t = self.cfg.values["train"]
        self.groups = self._make_groups()
        self.adam = Adam(self.groups, (t["beta1"], t["beta2"]), t["eps"])

    # -- parameter groups -----------------------------------------------------

    def _make_groups(self):
        t = self.cfg.values["train"]
        s = self.scene
        return [
            ParamGroup("features", {"features": s.volumes.data}, t["lr_features"]),
            ParamGroup("decoder", dict(s.decoder.params), t["lr_decoder"], enabled=s.decoder.kind == "mlp"),
            ParamGroup("poses", {"rotation": s.geometry.delta_rot, "translation": s.geometry.delta_trans},
                       t["lr_poses"], enabled=False),
            ParamGroup("radiometry", s.radiometry.arrays(), t["lr_radiometry"], enabled=False),
        ]

    def group(self, name):
        return self.adam.groups[name]

    def _configure_groups(self, epoch):
        parts = self.calib.parts(epoch)
        self.group("poses").enabled = "poses" in parts
        rad = self.group("radiometry")
        rad.frozen = {k for k in ("exposure", "bias", "response", "background") if k not in parts}
        rad.enabled = len(rad.frozen) < 4
        enabled = {"features"}
        if self.group("decoder").enabled:
            enabled.add("decoder")
        return enabled | parts

    # -- one optimization step ------------------------------------------------

    def _bc_points_cached(self):
        """Boundary quadrature points; they depend only on the tree structure."""
        if self._bc_points is None:
            tree = self.scene.tree
            self._bc_points = losses.boundary_points(tree, tree.neighbor_pairs(), self.cfg.values["loss"]["bc_points"])
        return self._bc_points

    def step(self, view_ids, pixels, targets, epoch, enabled, track_error=False):
        s = self.scene
        for g in self.adam.groups.values():
            g.zero_grad()
        grads = {name: g.grads for name, g in self.adam.groups.items()}
        mode = self.cfg.values["train"]["sampling"]
        tape = autodiff.forward(s, view_ids, pixels, targets, mode, self.cfg.values["train"]["seed"], epoch)
        res = tape.residual
        mse = float(np.mean(res * res))
        autodiff.backward(s, tape, 2.0 * res / len(res), grads, enabled)
        terms = {"mse": mse, "tv": 0.0, "bc": 0.0}
        w = self.weights
        g_feat = grads["features"]["features"]
        if w.lambda_tv > 0:
            tv, g = losses.tv_loss(s.tree, s.volumes, s.decoder, w.tv_variant, out=g_feat, weight=w.lambda_tv)
            terms["tv"] = tv
            if "decoder" in g and "decoder" in enabled:
                for k, v in g["decoder"].items():
                    grads["decoder"][k] += v
        if w.lambda_bc > 0:
            bc, _ = losses.bc_loss(s.tree, s.volumes, points=self._bc_points_cached(), out=g_feat,
                                   weight=w.lambda_bc)
            terms["bc"] = bc
        terms["total"] = losses.total_loss(terms["mse"], terms["tv"], terms["bc"], w)[0]
        if track_error:
            refine.accumulate_error(self.table, tape.batch, res, tape.sigma)
        self.adam.step()
        self._fix_gauge()
        terms["n_samples"] = tape.batch.n_samples
        return terms

    def _fix_gauge(self):
        """Pin the degeneracies over the training views: zero-mean exposure and
        bias, and pose corrections free of a common rigid motion (which the
        volume could otherwise absorb by moving with the poses)."""
        rad = self.scene.radiometry
        g = self.group("radiometry")
        tv = self.train_views
        for k in ("exposure", "bias"):
            if g.enabled and k not in g.frozen and len(tv):
                arr = getattr(rad, k)
                arr[tv] -= arr[tv].mean()
        if self.group("poses").enabled and len(tv) >= 3:
            geo = self.scene.geometry
            wr, wt = rigid_gauge_component(geo.delta_rot[tv], geo.delta_trans[tv], geo.base_source[tv])
            geo.delta_rot[tv] -= wr
            geo.delta_trans[tv] -= wt

    # -- epochs -----------------------------------------------------------------

    def epoch_rays(self, epoch):
        """Shuffled ``(view, pixel index)`` pairs of one epoch."""
        t = self.cfg.values["train"]
        n_total = len(self.train_views) * self._n_px
        rng = np.random.default_rng([t["seed"], epoch, 7])
        order = rng.permutation(n_total)
        if t["rays_per_epoch"] > 0:
            order = order[:t["rays_per_epoch"]]
        return self.train_views[order // self._n_px], order % self._n_px

    def run_epoch(self):
        epoch = self.epoch
        t0 = time.perf_counter()
        enabled = self._configure_groups(epoch)
        refine_on = self.cfg.values["refine"]["enabled"]
        self.table.reset(self.scene.tree.n_nodes)
        views, pix = self.epoch_rays(epoch)
        B = self.cfg.values["train"]["batch_rays"]
        H, W = self.dataset.intrinsics.shape
        sums = {"mse": 0.0, "tv": 0.0, "bc": 0.0, "total": 0.0}
        n_batches = 0
        n_samples = 0
        for s in range(0, len(views), B):
            vi = views[s:s + B]
            pi = pix[s:s + B]
            px = self._px[pi]
            tgt = self.dataset.images[vi, pi // W, pi % W].astype(np.float64)
            terms = self.step(vi, px, tgt, epoch, enabled, track_error=refine_on)
            for k in sums:
                sums[k] += terms[k]
            n_samples += terms["n_samples"]
            n_batches += 1
        means = {k: v / max(n_batches, 1) for k, v in sums.items()}
        self.history.append(means["total"])
        rec = {
            "epoch": epoch,
            "loss": means["total"],
            "mse": means["mse"],
            "tv": means["tv"],
            "bc": means["bc"],
            "train_psnr_running": psnr_from_mse(means["mse"], float(self.dataset.images.max()) or 1.0),
            "leaves": len(self.scene.tree.active_leaves()),
            "samples": n_samples,
            "calibrating": sorted(enabled - {"features", "decoder"}),
        }
        self.epoch += 1
        rec["refinement"] = self._maybe_refine(epoch)
        ev = self.cfg.values["train"]["eval_every"]
        if ev > 0 and (self.epoch % ev == 0):
            rep = evaluate_reconstruction(self.scene, self.dataset)
            rec["train_psnr"] = rep.train_psnr
            rec["test_psnr"] = rep.test_psnr
        rec["seconds"] = time.perf_counter() - t0
        self.records.append(rec)
        if self.log is not None:
            self.log(rec)
        return rec

    def _maybe_refine(self, epoch):
        r = self.cfg.values["refine"]
        if not r["enabled"]:
            return None
        if r["max_refinements"] > 0 and self.n_refinements >= r["max_refinements"]:
            return None
        if not refine.refinement_trigger(self.history, r["window"], r["threshold"], self.cfg.milestones(), epoch):
            return None
        return self.refine_now()

    def refine_now(self):
        r = self.cfg.values["refine"]
        m = self.cfg.values["model"]
        info = refine.apply_refinement(self.scene, self.table, r["max_leaves"], r["alpha"], m["max_depth"],
                                       r["tau_rel"], r["error_floor"], r["cull"])
        self._after_structure_change()
        self.n_refinements += 1
        self.history = []
        info["epoch"] = self.epoch - 1
        self.leaf_history.append(info["leaves_after"])
        return info

    def _after_structure_change(self):
        self.table = refine.NodeErrorTable(self.scene.tree.n_nodes)
        self._bc_points = None
        g = self.group("features")
        self.adam.reset_group(ParamGroup("features", {"features": self.scene.volumes.data}, g.lr, g.enabled))

    def fit(self, epochs=None):
        total = self.cfg.values["train"]["epochs"] if epochs is None else epochs
        every = self.cfg.values["train"]["checkpoint_every"]
        while self.epoch < total:
            self.run_epoch()
            if every > 0 and self.checkpoint_hook is not None and self.epoch % every == 0:
                self.checkpoint_hook(self)
        return self.records

    checkpoint_hook = None

    # -- checkpoints ------------------------------------------------------------

    def state_arrays(self):
        s = self.scene
        a = {f"tree.{k}": np.asarray(v) for k, v in s.tree.to_arrays().items()}
        a["features"] = s.volumes.data
        for k, v in s.decoder.to_arrays().items():
            a[f"decoder.{k}"] = v
        g = s.geometry
        a.update({"geometry.base_rotation": g.base_rotation, "geometry.base_source": g.base_source,
                  "geometry.delta_rot": g.delta_rot, "geometry.delta_trans": g.delta_trans})
        for k, v in s.radiometry.arrays().items():
            a[f"radiometry.{k}"] = v
        for k, v in self.adam.state_arrays().items():
            a[f"adam.{k}"] = v
        a["error.accum"] = self.table.accum
        a["error.sigma_max"] = self.table.sigma_max
        a["error.visits"] = self.table.visits
        return a

    def meta(self):
        rad = self.scene.radiometry
        return {
            "format": "octomo-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "history": self.history,
            "leaf_history": self.leaf_history,
            "n_refinements": self.n_refinements,
            "decoder": self.scene.decoder.kind,
            "n_samples": self.scene.n_samples,
            "intrinsics": self.scene.geometry.intrinsics.to_dict(),
            "radiometry": {"x_max": rad.x_max, "detector_shape": list(rad.detector_shape)},
            "losses": [{k: r[k] for k in ("epoch", "loss", "mse", "tv", "bc", "leaves")} for r in self.records],
        }

    def save(self, path):
        write_container(path, self.state_arrays(), self.meta())

    @classmethod
    def load(cls, path, dataset, log=None):
        arrays, meta = read_container(path)
        scene, meta = scene_from_container(arrays, meta)
        cfg = RunConfig.from_dict(meta["config"])
        rec = cls(cfg, dataset, scene=scene, log=log)
        rec.epoch = int(meta["epoch"])
        rec.history = list(meta["history"])
        rec.leaf_history = list(meta["leaf_history"])
        rec.n_refinements = int(meta["n_refinements"])
        rec.records = [dict(r) for r in meta.get("losses", [])]
        rec.adam.load_state_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("adam.")})
        rec.table = refine.NodeErrorTable(scene.tree.n_nodes)
        rec.table.accum[:] = arrays["error.accum"]
        rec.table.sigma_max[:] = arrays["error.sigma_max"]
        rec.table.visits[:] = arrays["error.visits"]
        return rec


def scene_from_container(arrays, meta):
    """Rebuild a ``Scene`` from checkpoint sections; returns ``(scene, meta)``."""
    if meta.get("format") != "octomo-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format {meta.get('format')!r} v{meta.get('version')!r}")
    try:
        tree = SparseOctree.from_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("tree.")})
        volumes = FeatureVolumes(arrays["features"])
        decoder = Decoder.from_arrays(meta["decoder"], {k[8:]: v for k, v in arrays.items()
                                                        if k.startswith("decoder.")})
        intr = Intrinsics.from_dict(meta["intrinsics"])
        geo = Geometry.__new__(Geometry)
        geo.intrinsics = intr
        geo.base_rotation = arrays["geometry.base_rotation"]
        geo.base_source = arrays["geometry.base_source"]
        geo.delta_rot = arrays["geometry.delta_rot"]
        geo.delta_trans = arrays["geometry.delta_trans"]
        r = meta["radiometry"]
        n_views = len(geo.base_source)
        rad = RadiometricModel(n_views, tuple(r["detector_shape"]), r["x_max"])
        rad.load_arrays({k[11:]: v for k, v in arrays.items() if k.startswith("radiometry.")})
    except (KeyError, ValueError, ConsistencyError) as e:
        raise FormatError(f"checkpoint is missing or has inconsistent sections ({e})") from None
    return Scene(tree, volumes, decoder, geo, rad, meta["n_samples"]), meta


def load_scene(path):
    arrays, meta = read_container(path)
    return scene_from_container(arrays, meta)


def reconstruct(cfg, dataset, epochs=None, log=None):
    """Convenience wrapper: train and return the ``Reconstructor``."""
    rec = Reconstructor(cfg, dataset, log=log)
    rec.fit(epochs)
    return rec
