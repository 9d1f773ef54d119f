"""PNG export of volume slices and octree overlays."""

from __future__ import annotations

import numpy as np
from PIL import Image

from ..errors import InputError
from .io import staged

AXES = {"x": 0, "y": 1, "z": 2}


def window_level(values, window, level, bits=8):
    """Map ``[level - window/2, level + window/2]`` linearly onto the full integer range."""
    if window <= 0:
        raise InputError("window must be > 0")
    top = (1 << bits) - 1
    lo = level - window / 2.0
    scaled = np.clip((np.asarray(values, dtype=np.float64) - lo) / window, 0.0, 1.0)
    return np.round(scaled * top).astype(np.uint8 if bits == 8 else np.uint16)


def volume_slice(volume, axis, index):
    """2-D slice of an ``[x, y, z]`` volume, oriented rows = second axis, cols = first axis."""
    a = AXES[axis] if isinstance(axis, str) else int(axis)
    sl = np.take(volume, index, axis=a)
    return sl.T


def save_png(path, image, window=None, level=None, bits=8):
    image = np.asarray(image, dtype=np.float64)
    if window is None:
        lo, hi = float(image.min()), float(image.max())
        window = (hi - lo) or 1.0
        level = lo + window / 2
    elif level is None:
        level = window / 2
    px = window_level(image, window, level, bits)
    mode = "L" if bits == 8 else "I;16"
    with staged(path) as tmp:
        Image.fromarray(px, mode=mode).save(tmp, format="PNG")


def tree_overlay(tree, errors, axis, coord, resolution):
    """RGB image of the leaves cut by the plane ``axis = coord``, coloured by error.

    Returns ``(rgb uint8 (res, res, 3), node ids drawn)``. Only ACTIVE leaves
    are drawn; their outlines are white.
    """
    a = AXES[axis] if isinstance(axis, str) else int(axis)
    u, v = [k for k in range(3) if k != a]
    leaves = tree.active_leaves()
    lo = tree.box_min[leaves]
    hi = lo + tree.size[leaves][:, None]
    hit = leaves[(lo[:, a] <= coord) & (coord < hi[:, a]) | ((coord == 0.5) & (hi[:, a] == 0.5))]
    img = np.zeros((resolution, resolution, 3), dtype=np.uint8)
    e = np.asarray(errors, dtype=np.float64)
    emax = float(e[hit].max()) if len(hit) and e[hit].max() > 0 else 1.0
    for n in hit:
        c0 = int(round((tree.box_min[n, u] + 0.5) * resolution))
        c1 = int(round((tree.box_min[n, u] + tree.size[n] + 0.5) * resolution))
        r0 = int(round((tree.box_min[n, v] + 0.5) * resolution))
        r1 = int(round((tree.box_min[n, v] + tree.size[n] + 0.5) * resolution))
        t = e[n] / emax
        img[r0:r1, c0:c1] = (int(255 * t), 64, int(255 * (1 - t)))
        img[r0, c0:c1] = img[max(r1 - 1, r0), c0:c1] = 255
        img[r0:r1, c0] = img[r0:r1, max(c1 - 1, c0)] = 255
    return img, hit


def save_rgb(path, rgb):
    with staged(path) as tmp:
        Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(tmp, format="PNG")
