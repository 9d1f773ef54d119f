"""PSNR and reconstruction evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data.dataset import TEST, TRAIN
from .data.phantoms import voxels
from .errors import InputError
from .sampler import UNIFORM

PSNR_CAP = 99.0


def psnr(a, b, peak):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    if not peak > 0:
        raise InputError("peak must be > 0")
    mse = float(np.mean((a - b) ** 2))
    return psnr_from_mse(mse, peak)


def psnr_from_mse(mse, peak):
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


@dataclass
class EvalReport:
    volumetric_psnr: float | None = None
    train_psnr: float | None = None
    test_psnr: float | None = None
    per_view: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    leaf_history: list = field(default_factory=list)
    peaks: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self):
        def f(x):
            return "n/a" if x is None else f"{x:.2f} dB"
        lines = [
            f"volumetric PSNR : {f(self.volumetric_psnr)}  (peak = max of ground truth)",
            f"train PSNR      : {f(self.train_psnr)}  (peak = max of measured targets)",
            f"test PSNR       : {f(self.test_psnr)}",
            "",
            "view  split  psnr_db",
        ]
        for r in self.per_view:
            lines.append(f"{r['view']:4d}  {r['split']:<5}  {r['psnr']:.2f}")
        return "\n".join(lines) + "\n"


def render_residuals(scene, dataset, views):
    """Evaluation-mode residual image per view (prediction minus corrected target)."""
    out = {}
    from .scene import pixel_grid
    px = pixel_grid(dataset.intrinsics.shape)
    for v in views:
        pred = scene.render_view(int(v), mode=UNIFORM).ravel()
        bg = scene.radiometry.background_at(np.full(len(px), v), px)
        out[int(v)] = pred - (dataset.images[v].astype(np.float64).ravel() + bg)
    return out


def evaluate_reconstruction(scene, dataset=None, ground_truth=None, eval_resolution=None):
    """Volumetric PSNR at ground-truth voxel centres and reprojection PSNR per split."""
    rep = EvalReport()
    if ground_truth is not None:
        gt = voxels(ground_truth)
        res = gt.shape if eval_resolution is None else eval_resolution
        if tuple(np.broadcast_to(res, 3)) != gt.shape:
            raise InputError("eval resolution must match the ground-truth grid")
        est = scene.decode_dense(gt.shape)
        peak = float(gt.max())
        rep.peaks["volumetric"] = peak
        rep.volumetric_psnr = psnr(est, gt, peak) if peak > 0 else None
    if dataset is not None:
        peak = float(dataset.images.max())
        rep.peaks["reprojection"] = peak
        res = render_residuals(scene, dataset, range(dataset.n_views))
        for which in (TRAIN, TEST):
            views = dataset.views(which)
            if len(views) == 0:
                continue
            mse = float(np.mean(np.concatenate([res[v] for v in views]) ** 2))
            val = psnr_from_mse(mse, peak)
            if which == TRAIN:
                rep.train_psnr = val
            else:
                rep.test_psnr = val
        for v in range(dataset.n_views):
            rep.per_view.append({"view": v, "split": str(dataset.split[v]),
                                 "psnr": psnr_from_mse(float(np.mean(res[v] ** 2)), peak)})
    return rep
