"""Command line entry point: ``octomo {synth,reconstruct,eval,export,baseline}``.

Configuration precedence, lowest to highest: built-in defaults, ``--preset``,
``--config`` file, ``--set section.key=value``. Every command builds its
outputs in a staging directory next to ``--out`` and renames it into place
only after success, so a failed run never leaves partial results there.
When ``--out`` is omitted, outputs go to ``$OCTOMO_RUN_DIR/<command>``
(``./runs/<command>`` if the variable is unset).

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback

import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines, refine
from .calib import apply_radiometric_jitter, calibration_report
from .config import PRESETS, RunConfig
from .data import (TRAIN, load_dataset, load_volume, make_phantom, read_container, save_dataset, save_volume,
                   split_views, synthesize_projections)
from .data.export import AXES, save_png, save_rgb, tree_overlay, volume_slice
from .data.io import staged
from .errors import ConfigurationError, OctomoError
from .geometry import fit_intrinsics, make_circular_trajectory
from .metrics import evaluate_reconstruction
from .train import Reconstructor, scene_from_container

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUN_DIR_ENV = "OCTOMO_RUN_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


def _dump(obj):
    return json.dumps(obj, sort_keys=True, default=_json_default)


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def default_out(command):
    return os.path.join(os.environ.get(RUN_DIR_ENV, "runs"), command)


def load_config(args):
    return RunConfig.load(args.config, args.preset, args.set)


def trajectory(cfg):
    """Poses and intrinsics described by the ``[data]`` section."""
    d = cfg.values["data"]
    intr = fit_intrinsics(d["detector_width"], d["detector_height"], d["radius"])
    poses = make_circular_trajectory(d["n_views"], np.radians(d["angular_range_deg"]), d["radius"], intr,
                                     np.radians(d["start_angle_deg"]))
    return poses, intr


def synthesize(cfg):
    """Phantom and split dataset for a configuration."""
    d = cfg.values["data"]
    vol = make_phantom(d["phantom"], d["resolution"], d["seed"])
    poses, intr = trajectory(cfg)
    ds = synthesize_projections(vol, poses, intr, d["noise_sigma_rel"], d["seed"])
    ds = split_views(ds, d["test_fraction"], d["seed"])
    if d["exposure_jitter"] > 0 or d["bias_jitter"] > 0:
        ds, _, _ = apply_radiometric_jitter(ds, d["exposure_jitter"], d["bias_jitter"], d["seed"])
    return vol, ds


def _ground_truth(path):
    if path is None:
        return None
    data, _ = load_volume(path)
    return data


def _write_report(out, rep):
    _write_text(os.path.join(out, "report.json"), rep.to_json())
    _write_text(os.path.join(out, "report.txt"), rep.to_text())


class _EpochLog:
    """JSON-lines epoch log, optionally echoed to stdout."""

    def __init__(self, path, echo):
        self.fh = open(path, "a")
        self.echo = echo

    def __call__(self, rec):
        line = _dump(rec)
        self.fh.write(line + "\n")
        self.fh.flush()
        if self.echo:
            print(line, flush=True)

    def close(self):
        self.fh.close()


def _train(cfg, dataset, out, args, resume=None):
    log = _EpochLog(os.path.join(out, "log.jsonl"), not args.quiet)
    try:
        if resume is not None:
            rec = Reconstructor.load(resume, dataset, log=log)
            rec.cfg.values["train"]["epochs"] = cfg.values["train"]["epochs"]
        else:
            rec = Reconstructor(cfg, dataset, log=log)
        every = cfg.values["train"]["checkpoint_every"]
        if every > 0:
            rec.checkpoint_hook = lambda r: r.save(os.path.join(out, f"checkpoint_{r.epoch:04d}.neat"))
        with threadpool_limits(cfg.values["train"]["threads"]):
            rec.fit()
    finally:
        log.close()
    rec.save(os.path.join(out, "checkpoint.neat"))
    return rec


# --------------------------------------------------------------------------
# commands

def cmd_synth(args):
    cfg = load_config(args)
    out = args.out or default_out("synth")
    vol, ds = synthesize(cfg)
    with staged(out, is_dir=True) as tmp:
        save_dataset(os.path.join(tmp, "dataset"), ds)
        save_volume(os.path.join(tmp, "volume.vol"), vol.data, phantom=vol.name, seed=vol.seed)
        _write_text(os.path.join(tmp, "config.ini"), cfg.to_ini())
    print(f"wrote {ds.n_views} views and a {'x'.join(map(str, vol.data.shape))} volume to {out}")
    return EXIT_OK


def cmd_reconstruct(args):
    cfg = load_config(args)
    if args.epochs is not None:
        cfg.set("train", "epochs", args.epochs)
        cfg.validate()
    dataset = load_dataset(args.dataset)
    gt = _ground_truth(args.gt)
    out = args.out or default_out("reconstruct")
    with staged(out, is_dir=True) as tmp:
        _write_text(os.path.join(tmp, "config.ini"), cfg.to_ini())
        rec = _train(cfg, dataset, tmp, args, args.resume)
        with threadpool_limits(cfg.values["train"]["threads"]):
            rep = evaluate_reconstruction(rec.scene, dataset, gt)
        rep.leaf_history = list(rec.leaf_history)
        rep.timing = {"train_seconds": float(sum(r["seconds"] for r in rec.records))}
        _write_report(tmp, rep)
        if rec.calib.any_enabled or rec.calib.pose_noise_rot > 0 or rec.calib.pose_noise_trans > 0:
            # held-out views are neither perturbed nor optimized
            cal = calibration_report(rec.scene.geometry, dataset.poses, rec.scene.radiometry,
                                     views=dataset.views(TRAIN), before=rec.initial_poses)
            _write_text(os.path.join(tmp, "calibration.json"), _dump(cal))
    print(rep.to_text(), end="")
    return EXIT_OK


def evaluate_checkpoint(checkpoint, dataset=None, ground_truth=None):
    """Library form of ``octomo eval`` (the CLI writes exactly this report)."""
    arrays, meta = read_container(checkpoint)
    scene, meta = scene_from_container(arrays, meta)
    cfg = RunConfig.from_dict(meta["config"])
    with threadpool_limits(cfg.values["train"]["threads"]):
        rep = evaluate_reconstruction(scene, dataset, ground_truth)
    rep.leaf_history = list(meta.get("leaf_history", []))
    return rep


def cmd_eval(args):
    dataset = load_dataset(args.dataset) if args.dataset else None
    rep = evaluate_checkpoint(args.checkpoint, dataset, _ground_truth(args.gt))
    out = args.out or default_out("eval")
    with staged(out, is_dir=True) as tmp:
        _write_report(tmp, rep)
    print(rep.to_text(), end="")
    return EXIT_OK


def cmd_export(args):
    arrays, meta = read_container(args.checkpoint)
    scene, meta = scene_from_container(arrays, meta)
    res = args.resolution
    out = args.out or default_out("export")
    axes = [args.axis] if args.axis else list(AXES)
    with staged(out, is_dir=True) as tmp:
        if args.what == "volume":
            save_volume(os.path.join(tmp, "volume.vol"), scene.decode_dense(res), source=os.path.basename(args.checkpoint))
        elif args.what == "slices":
            vol = scene.decode_dense(res)
            idx = res // 2 if args.index is None else args.index
            if not 0 <= idx < res:
                raise ConfigurationError(f"slice index {idx} outside [0, {res})")
            for ax in axes:
                save_png(os.path.join(tmp, f"slice_{ax}_{idx:04d}.png"), volume_slice(vol, ax, idx),
                         args.window, args.level)
        else:
            table = refine.NodeErrorTable(scene.tree.n_nodes)
            table.accum[:] = arrays["error.accum"]
            table.sigma_max[:] = arrays["error.sigma_max"]
            errors = table.errors()
            coord = 0.0 if args.coord is None else args.coord
            drawn = {}
            for ax in axes:
                rgb, hit = tree_overlay(scene.tree, errors, ax, coord, res)
                save_rgb(os.path.join(tmp, f"tree_{ax}.png"), rgb)
                drawn[ax] = [int(n) for n in hit]
            _write_text(os.path.join(tmp, "tree_nodes.json"), _dump({"coord": coord, "nodes": drawn}))
    print(f"exported {args.what} to {out}")
    return EXIT_OK


def cmd_baseline(args):
    cfg = load_config(args)
    if args.epochs is not None:
        cfg.set("train", "epochs", args.epochs)
    dataset = load_dataset(args.dataset)
    gt = _ground_truth(args.gt)
    out = args.out or default_out("baseline")
    with staged(out, is_dir=True) as tmp:
        if args.method == baselines.NO_DECODER:
            bcfg = baselines.no_decoder_config(cfg)
            _write_text(os.path.join(tmp, "config.ini"), bcfg.to_ini())
            rec = _train(bcfg, dataset, tmp, args)
            with threadpool_limits(bcfg.values["train"]["threads"]):
                rep = evaluate_reconstruction(rec.scene, dataset, gt)
            rep.leaf_history = list(rec.leaf_history)
        else:
            _write_text(os.path.join(tmp, "config.ini"), cfg.to_ini())
            shape = gt.shape if gt is not None else (cfg.values["data"]["resolution"],) * 3
            vol = baselines.run_sirt(dataset, shape, args.iterations)
            save_volume(os.path.join(tmp, "volume.vol"), vol, method="sirt", iterations=args.iterations)
            rep = baselines.evaluate_volume(vol, dataset, gt)
        _write_report(tmp, rep)
    print(rep.to_text(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def _config_args(p):
    p.add_argument("--config", help="INI file with [data] [model] [train] [loss] [refine] [calib] sections")
    p.add_argument("--preset", choices=PRESETS, help="view-count / angle / TV preset (applied before --config)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")


def build_parser():
    ap = _Parser(prog="octomo", description="Sparse octree feature-grid tomography.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="make a phantom and its projection dataset")
    _config_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reconstruct", help="train a reconstruction on a dataset")
    _config_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--gt", help="ground-truth volume file for volumetric PSNR")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--quiet", action="store_true", help="do not echo the epoch log")
    p.add_argument("--out")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--gt")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="slices, dense volume or octree overlay from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--what", choices=("slices", "volume", "tree_viz"), default="slices")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--axis", choices=tuple(AXES))
    p.add_argument("--index", type=int, help="slice index (default: middle)")
    p.add_argument("--coord", type=float, help="plane coordinate in [-0.5, 0.5] for tree_viz (default 0)")
    p.add_argument("--window", type=float)
    p.add_argument("--level", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("baseline", help="run a comparison method")
    _config_args(p)
    p.add_argument("--method", choices=baselines.METHODS, required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--gt")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int, default=50, help="SIRT iterations")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)
    return ap


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "resolution", 1) < 1:
            raise UsageError("--resolution must be >= 1")
        return args.func(args)
    except (UsageError, ConfigurationError) as e:
        print(f"octomo: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OctomoError, OSError) as e:
        print(f"octomo: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
