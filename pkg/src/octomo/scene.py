"""Scene container: everything the renderer needs in one place."""

from __future__ import annotations

import numpy as np

from . import field
from .errors import InputError
from .octree import ACTIVE
from .render import integrate
from .sampler import STRATIFIED, UNIFORM, build_samples

RAY_CHUNK = 8192


def pixel_grid(shape):
    """All ``(u, v)`` pixel centres of an ``(H, W)`` detector, row-major."""
    H, W = shape
    v, u = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


class Scene:
    def __init__(self, tree, volumes, decoder, geometry, radiometry, n_samples=16):
        if volumes.n_slots != tree.n_slots:
            raise InputError(f"{volumes.n_slots} feature grids for {tree.n_slots} slots")
        self.tree = tree
        self.volumes = volumes
        self.decoder = decoder
        self.geometry = geometry
        self.radiometry = radiometry
        self.n_samples = int(n_samples)

    @property
    def detector_shape(self):
        return self.geometry.intrinsics.shape

    def ray_ids(self, view_ids, pixels):
        H, W = self.detector_shape
        pixels = np.asarray(pixels)
        return (np.asarray(view_ids, dtype=np.int64) * (H * W)
                + pixels[:, 1].astype(np.int64) * W + pixels[:, 0].astype(np.int64))

    def sample(self, view_ids, pixels, mode=UNIFORM, seed=0, epoch=0):
        o, d, cache = self.geometry.rays(view_ids, pixels)
        batch = build_samples(self.tree, o, d, self.n_samples, mode, seed, epoch,
                              self.ray_ids(view_ids, pixels))
        return batch, o, d, cache

    def render_rays(self, view_ids, pixels, mode=UNIFORM, radiometry=True, seed=0, epoch=0):
        """Predicted values for arbitrary ``(view, pixel)`` pairs, processed in chunks."""
        view_ids = np.asarray(view_ids, dtype=np.int64)
        pixels = np.asarray(pixels, dtype=np.float64)
        out = np.zeros(len(view_ids))
        for s in range(0, len(view_ids), RAY_CHUNK):
            vi, px = view_ids[s:s + RAY_CHUNK], pixels[s:s + RAY_CHUNK]
            batch, *_ = self.sample(vi, px, mode, seed, epoch)
            if batch.n_samples:
                f = field.gather_samples(batch, self.tree, self.volumes)
                out[s:s + RAY_CHUNK] = integrate(batch, self.decoder.decode(f).astype(np.float64))
            if radiometry:
                out[s:s + RAY_CHUNK] = self.radiometry.apply(out[s:s + RAY_CHUNK], vi)
        return out

    def render_view(self, view_id, pixel_subset=None, mode=UNIFORM, radiometry=True, seed=0, epoch=0):
        if not 0 <= view_id < self.geometry.n_views:
            raise InputError(f"view {view_id} out of range")
        if mode not in (UNIFORM, STRATIFIED):
            raise InputError(f"unknown sampling mode {mode!r}")
        if pixel_subset is None:
            px = pixel_grid(self.detector_shape)
        else:
            px = np.asarray(pixel_subset, dtype=np.float64).reshape(-1, 2)
        vals = self.render_rays(np.full(len(px), view_id), px, mode, radiometry, seed, epoch)
        return vals.reshape(self.detector_shape) if pixel_subset is None else vals

    def density(self, points):
        """Decoded density at world points; EMPTY leaves and points outside the cube give 0."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.zeros(len(points))
        inside = np.all((points >= -0.5) & (points <= 0.5), axis=1)
        idx = np.flatnonzero(inside)
        if len(idx) == 0:
            return out
        nodes, local = self.tree.locate_batch(points[idx])
        act = self.tree.state[nodes] == ACTIVE
        idx, nodes, local = idx[act], nodes[act], local[act]
        step = 1 << 16
        for s in range(0, len(idx), step):
            f = field.gather(self.volumes, self.tree.slot[nodes[s:s + step]], local[s:s + step])
            out[idx[s:s + step]] = self.decoder.decode(f)
        return out

    def decode_dense(self, resolution):
        """Density at voxel centres of an ``(nx, ny, nz)`` grid over the cube, indexed ``[x, y, z]``."""
        res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
        axes = [(np.arange(n) + 0.5) / n - 0.5 for n in res]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return self.density(np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)).reshape(res)

    def copy(self):
        geo = self.geometry.__class__.__new__(self.geometry.__class__)
        geo.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                             for k, v in self.geometry.__dict__.items()})
        return Scene(self.tree.copy(), self.volumes.copy(), self.decoder.copy(), geo,
                     self.radiometry.copy(), self.n_samples)
