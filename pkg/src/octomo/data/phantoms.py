"""Synthetic density volumes on regular voxel grids.

Volumes are indexed ``[x, y, z]`` and cover the unit cube: voxel ``i`` along
an axis of ``n`` voxels is centred at ``(i + 0.5) / n - 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, InputError

SHEPP_LOGAN_3D = "shepp_logan_3d"
BLOBS = "blobs"
BOX_OCTANT = "box_octant"
NESTED_SHELLS = "nested_shells"
KINDS = (SHEPP_LOGAN_3D, BLOBS, BOX_OCTANT, NESTED_SHELLS)

# Modified 3D Shepp-Logan table on [-1, 1]^3 (Schabel's phantom3d variant):
# amplitude, semi-axes (a, b, c), centre (x0, y0, z0), Euler angles (phi, theta, psi) in degrees.
SHEPP_LOGAN_TABLE = np.array([
    [1.0, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.00, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.00, 0.0, 0.0, 0.0],
    [-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.00, -18.0, 0.0, 10.0],
    [-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.00, 18.0, 0.0, 10.0],
    [0.1, 0.2100, 0.250, 0.410, 0.00, 0.3500, -0.15, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.25, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.25, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.00, 0.0, 0.0, 0.0],
    [0.1, 0.0230, 0.023, 0.020, 0.00, -0.6060, 0.00, 0.0, 0.0, 0.0],
    [0.1, 0.0230, 0.046, 0.020, 0.06, -0.6050, 0.00, 0.0, 0.0, 0.0],
])


@dataclass
class VoxelVolume:
    data: np.ndarray
    name: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InputError("voxel data must be 3-D")
        if not np.all(np.isfinite(self.data)) or np.any(self.data < 0):
            raise InputError("voxel densities must be finite and nonnegative")

    @property
    def resolution(self):
        return self.data.shape

    def voxel_centers(self, axis):
        n = self.data.shape[axis]
        return (np.arange(n) + 0.5) / n - 0.5


def voxels(volume):
    """Plain array behind a ``VoxelVolume`` (arrays pass through)."""
    return np.asarray(volume.data if isinstance(volume, VoxelVolume) else volume)


def voxel_grid(resolution):
    """World coordinates of voxel centres, three arrays of shape ``resolution``."""
    axes = [(np.arange(n) + 0.5) / n - 0.5 for n in resolution]
    return np.meshgrid(*axes, indexing="ij")


def euler_zxz(phi, theta, psi):
    """Rotation used by the Shepp-Logan table (angles in degrees)."""
    p, t, s = np.radians([phi, theta, psi])
    cp, sp, ct, st, cs, ss = np.cos(p), np.sin(p), np.cos(t), np.sin(t), np.cos(s), np.sin(s)
    return np.array([
        [cs * cp - ct * sp * ss, cs * sp + ct * cp * ss, ss * st],
        [-ss * cp - ct * sp * cs, -ss * sp + ct * cp * cs, cs * st],
        [st * sp, -st * cp, ct],
    ])


def ellipsoid_mask(points, row):
    """Membership of ``(..., 3)`` points in ``[-1, 1]^3`` coordinates for one table row."""
    a, b, c = row[1:4]
    centre = row[4:7]
    R = euler_zxz(*row[7:10])
    q = points @ R.T
    q = q - centre
    return (q[..., 0] / a) ** 2 + (q[..., 1] / b) ** 2 + (q[..., 2] / c) ** 2 <= 1.0


def shepp_logan_value(points):
    """Phantom density at ``(..., 3)`` points given in ``[-1, 1]^3`` coordinates."""
    points = np.asarray(points, dtype=np.float64)
    out = np.zeros(points.shape[:-1])
    for row in SHEPP_LOGAN_TABLE:
        out += row[0] * ellipsoid_mask(points, row)
    return out


def make_phantom(kind, resolution=64, seed=0):
    res = (int(resolution),) * 3 if np.isscalar(resolution) else tuple(int(r) for r in resolution)
    if min(res) < 8:
        raise InputError("phantom resolution must be >= 8")
    X, Y, Z = voxel_grid(res)
    if kind == SHEPP_LOGAN_3D:
        pts = np.stack([X, Y, Z], axis=-1) * 2.0
        data = np.clip(shepp_logan_value(pts), 0.0, None)
    elif kind == BLOBS:
        rng = np.random.default_rng(seed)
        n = int(rng.integers(8, 13))
        data = np.zeros(res)
        for _ in range(n):
            while True:
                c = rng.uniform(-0.3, 0.3, 3)
                if np.linalg.norm(c) <= 0.3:
                    break
            w = rng.uniform(0.04, 0.12)
            amp = rng.uniform(0.5, 1.0)
            data += amp * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / (2 * w * w))
    elif kind == BOX_OCTANT:
        data = ((X >= 0) & (Y >= 0) & (Z >= 0)).astype(np.float64)
    elif kind == NESTED_SHELLS:
        r = np.sqrt(X ** 2 + Y ** 2 + Z ** 2)
        thick = 2.0 / max(res)
        data = np.zeros(res)
        for k, radius in enumerate((0.1, 0.2, 0.3, 0.4)):
            data[np.abs(r - radius) <= thick / 2 + 1e-12] = 1.0 if k % 2 == 0 else 0.5
    else:
        raise ConfigurationError(f"unknown phantom kind {kind!r}")
    return VoxelVolume(data, name=kind, seed=int(seed))
