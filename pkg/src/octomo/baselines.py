"""Comparison methods: the decoder-free feature grid and SIRT on voxels."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .data.dataset import TEST, TRAIN
from .data.phantoms import voxels
from .data.projector import project, sirt
from .errors import ConfigurationError, InputError
from .metrics import EvalReport, psnr, psnr_from_mse

NO_DECODER = "no_decoder"
SIRT = "sirt"
METHODS = (NO_DECODER, SIRT)


def no_decoder_config(cfg):
    """Same pipeline with one channel decoded by SoftPlus alone.

    The lattice grows from ``G`` to ``2 G`` vertices per axis, so with the
    default eight channels every node carries the same number of variables:
    ``8 G^3 = (2 G)^3``.
    """
    out = RunConfig.from_dict(cfg.to_dict())
    m = cfg.values["model"]
    out.set("model", "grid", 2 * m["grid"])
    out.set("model", "features", 1)
    out.set("model", "decoder", "identity")
    # SoftPlus(-1) matches the initial density of the MLP's output bias
    out.set("model", "feature_mean", m["output_bias"])
    return out.validate()


def feature_param_count(cfg, n_nodes=1):
    m = cfg.values["model"]
    return n_nodes * m["features"] * m["grid"] ** 3


def run_sirt(dataset, shape, n_iter=50, relaxation=1.0, callback=None):
    """SIRT from the training views only; returns the voxel volume ``[x, y, z]``."""
    if np.any(np.asarray(shape) < 2):
        raise InputError("SIRT grid needs at least 2 voxels per axis")
    train = dataset.views(TRAIN)
    if len(train) == 0:
        raise ConfigurationError("dataset has no training views")
    geo = dataset.geometry()
    return sirt(dataset.images[train], geo, tuple(shape), train, n_iter, relaxation, callback=callback)


def evaluate_volume(volume, dataset=None, ground_truth=None):
    """``EvalReport`` for a plain voxel reconstruction, reprojected with the voxel projector."""
    rep = EvalReport()
    volume = np.asarray(volume, dtype=np.float64)
    if ground_truth is not None:
        gt = voxels(ground_truth)
        if gt.shape != volume.shape:
            raise InputError("ground truth and reconstruction grids differ")
        peak = float(gt.max())
        rep.peaks["volumetric"] = peak
        rep.volumetric_psnr = psnr(volume, gt, peak) if peak > 0 else None
    if dataset is not None:
        peak = float(dataset.images.max())
        rep.peaks["reprojection"] = peak
        pred = project(volume, dataset.geometry())
        res = pred - dataset.images.astype(np.float64)
        for which in (TRAIN, TEST):
            views = dataset.views(which)
            if len(views) == 0:
                continue
            val = psnr_from_mse(float(np.mean(res[views] ** 2)), peak)
            if which == TRAIN:
                rep.train_psnr = val
            else:
                rep.test_psnr = val
        for v in range(dataset.n_views):
            rep.per_view.append({"view": v, "split": str(dataset.split[v]),
                                 "psnr": psnr_from_mse(float(np.mean(res[v] ** 2)), peak)})
    return rep
