"""Projection datasets: synthesis, train/test split and the directory format.

A dataset directory holds ``dataset.json`` (geometry, splits, provenance)
and one raw little-endian float32 image per view, ``view_XXXX.f32``, stored
row-major ``(H, W)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import FormatError, InputError
from ..geometry import Geometry, Intrinsics, ViewPose, trajectory_angle
from .io import staged
from .phantoms import voxels
from .projector import project

TRAIN = "train"
TEST = "test"
FORMAT_NAME = "octomo-dataset"
FORMAT_VERSION = 1
GENERATOR_VERSION = "1"


@dataclass
class ProjectionDataset:
    images: np.ndarray  # (V, H, W) float32 log-space targets
    poses: list
    intrinsics: Intrinsics
    split: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3 or self.images.shape[1:] != self.intrinsics.shape:
            raise InputError(f"images {self.images.shape} do not match detector {self.intrinsics.shape}")
        if len(self.poses) != len(self.images):
            raise InputError("one pose per image required")
        if self.split is None:
            self.split = np.full(len(self.images), TRAIN)
        self.split = np.asarray(self.split, dtype="<U5")
        if len(self.split) != len(self.images) or not np.all(np.isin(self.split, (TRAIN, TEST))):
            raise InputError("every view needs exactly one split label (train/test)")

    @property
    def n_views(self):
        return len(self.images)

    def views(self, which):
        return np.flatnonzero(self.split == which)

    def geometry(self):
        return Geometry(self.poses, self.intrinsics)

    def copy(self):
        return ProjectionDataset(self.images.copy(), [ViewPose(p.rotation.copy(), p.source_position.copy(),
                                                              p.pose_delta_rotation.copy(),
                                                              p.pose_delta_translation.copy()) for p in self.poses],
                                 self.intrinsics, self.split.copy(), json.loads(json.dumps(self.provenance)))


def synthesize_projections(volume, poses, intrinsics, noise_sigma_rel=0.02, seed=0, step=None):
    """Render a voxel volume through the ground-truth projector and add Gaussian noise.

    The noise level is ``noise_sigma_rel`` times the largest clean pixel over
    the whole dataset.
    """
    data = voxels(volume)
    if noise_sigma_rel < 0:
        raise InputError("noise level must be >= 0")
    geo = Geometry(poses, intrinsics)
    clean = project(data, geo, step=step)
    peak = float(clean.max()) if clean.size else 0.0
    sigma = noise_sigma_rel * peak
    rng = np.random.default_rng(seed)
    noisy = clean + rng.normal(0.0, 1.0, clean.shape) * sigma if sigma > 0 else clean
    prov = {
        "phantom": getattr(volume, "name", ""),
        "phantom_seed": int(getattr(volume, "seed", 0)),
        "noise_sigma_rel": float(noise_sigma_rel),
        "noise_sigma": sigma,
        "seed": int(seed),
        "generator_version": GENERATOR_VERSION,
    }
    return ProjectionDataset(noisy.astype(np.float32), list(poses), intrinsics, provenance=prov)


def split_views(dataset, test_fraction=0.2, seed=0):
    """Label views TRAIN/TEST so test views are spread evenly over the trajectory angle."""
    if not 0 <= test_fraction < 1:
        raise InputError("test_fraction must lie in [0, 1)")
    V = dataset.n_views
    n_test = int(round(test_fraction * V))
    split = np.full(V, TRAIN, dtype="<U5")
    if n_test:
        angles = np.array([trajectory_angle(p) for p in dataset.poses])
        order = np.argsort(angles, kind="stable")
        offset = np.random.default_rng(seed).uniform()
        pos = np.floor((np.arange(n_test) + offset) * V / n_test).astype(np.int64)
        split[order[np.minimum(pos, V - 1)]] = TEST
    out = dataset.copy()
    out.split = split
    out.provenance["split_seed"] = int(seed)
    out.provenance["test_fraction"] = float(test_fraction)
    return out


def _pose_dict(p):
    return {
        "rotation": [float(x) for x in p.rotation],
        "source": [float(x) for x in p.source_position],
        "delta_rotation": [float(x) for x in p.pose_delta_rotation],
        "delta_translation": [float(x) for x in p.pose_delta_translation],
    }


def save_dataset(path, dataset):
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "intrinsics": dataset.intrinsics.to_dict(),
        "views": [dict(_pose_dict(p), file=f"view_{i:04d}.f32", split=str(s))
                  for i, (p, s) in enumerate(zip(dataset.poses, dataset.split))],
        "provenance": dataset.provenance,
    }
    with staged(path, is_dir=True) as tmp:
        for i, img in enumerate(dataset.images):
            with open(os.path.join(tmp, f"view_{i:04d}.f32"), "wb") as fh:
                fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
        with open(os.path.join(tmp, "dataset.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)


def load_dataset(path):
    mp = os.path.join(path, "dataset.json")
    if not os.path.isfile(mp):
        raise FileNotFoundError(mp)
    try:
        with open(mp) as fh:
            meta = json.load(fh)
    except ValueError as e:
        raise FormatError(f"{mp}: {e}") from None
    if meta.get("format") != FORMAT_NAME or meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"{mp}: unsupported format/version {meta.get('format')!r}/{meta.get('version')!r}")
    try:
        intr = Intrinsics.from_dict(meta["intrinsics"])
        H, W = intr.shape
        images, poses, split = [], [], []
        for v in meta["views"]:
            with open(os.path.join(path, v["file"]), "rb") as fh:
                raw = fh.read()
            if len(raw) != H * W * 4:
                raise FormatError(f"{v['file']}: expected {H * W * 4} bytes, found {len(raw)}")
            images.append(np.frombuffer(raw, dtype="<f4").reshape(H, W))
            poses.append(ViewPose(np.array(v["rotation"]), np.array(v["source"]),
                                  np.array(v["delta_rotation"]), np.array(v["delta_translation"])))
            split.append(v["split"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{mp}: malformed metadata ({e})") from None
    return ProjectionDataset(np.stack(images).astype(np.float32), poses, intr, np.array(split),
                             meta.get("provenance", {}))
