"""Ground-truth forward model on voxel grids and the SIRT baseline.

This path marches rays through trilinearly interpolated voxels with a fixed
step and shares nothing with the octree renderer beyond ray generation.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import InputError
from ..scene import pixel_grid


def default_step(shape):
    """Half the smallest voxel edge."""
    return 0.5 / max(shape)


def view_rays(geometry, view_ids):
    px = pixel_grid(geometry.intrinsics.shape)
    vid = np.repeat(np.asarray(view_ids, dtype=np.int64), len(px))
    o, d, _ = geometry.rays(vid, np.tile(px, (len(view_ids), 1)))
    return o, d


def project(volume, geometry, view_ids=None, step=None):
    """Line-integral images ``(n_views, H, W)`` of a voxel volume."""
    volume = np.ascontiguousarray(volume, dtype=np.float64)
    if volume.ndim != 3 or min(volume.shape) < 2:
        raise InputError("volume must be 3-D with at least 2 voxels per axis")
    view_ids = np.arange(geometry.n_views) if view_ids is None else np.asarray(view_ids)
    step = default_step(volume.shape) if step is None else step
    H, W = geometry.intrinsics.shape
    out = np.empty((len(view_ids), H, W))
    for i, v in enumerate(view_ids):
        o, d = view_rays(geometry, [v])
        out[i] = kernels.march(volume, o, d, step).reshape(H, W)
    return out


def backproject(shape, geometry, images, view_ids=None, step=None):
    """Adjoint of ``project``."""
    view_ids = np.arange(geometry.n_views) if view_ids is None else np.asarray(view_ids)
    step = default_step(shape) if step is None else step
    acc = np.zeros(shape)
    for i, v in enumerate(view_ids):
        o, d = view_rays(geometry, [v])
        acc += kernels.march_adjoint(tuple(shape), o, d, step, np.ascontiguousarray(images[i], dtype=np.float64).ravel())
    return acc


def sirt(images, geometry, shape, view_ids=None, n_iter=50, relaxation=1.0, nonneg=True, callback=None):
    """Simultaneous iterative reconstruction: ``x += C A^T R (b - A x)``.

    ``R`` and ``C`` are the inverse row and column sums of the projector.
    """
    view_ids = np.arange(geometry.n_views) if view_ids is None else np.asarray(view_ids)
    b = np.asarray(images, dtype=np.float64)
    row = project(np.ones(shape), geometry, view_ids)
    col = backproject(shape, geometry, np.ones_like(b), view_ids)
    R = np.where(row > 1e-12, 1.0 / np.where(row > 1e-12, row, 1.0), 0.0)
    C = np.where(col > 1e-12, 1.0 / np.where(col > 1e-12, col, 1.0), 0.0)
    x = np.zeros(shape)
    for it in range(n_iter):
        r = (b - project(x, geometry, view_ids)) * R
        x += relaxation * C * backproject(shape, geometry, r, view_ids)
        if nonneg:
            np.maximum(x, 0.0, out=x)
        if callback is not None:
            callback(it, x)
    return x
