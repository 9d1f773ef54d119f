"""Cone-beam acquisition model: poses, intrinsics, rays and pose perturbations.

World coordinates put the reconstruction domain in the unit cube
``[-0.5, 0.5]^3``. Each view is a rigid scanner frame whose origin is the
X-ray source; the detector plane sits at ``z = source_to_detector_distance``
in scanner coordinates, with detector column ``u`` along scanner ``x`` and
detector row ``v`` along scanner ``y``.

Learnable pose corrections are an axis-angle rotation applied on the left of
the frozen base rotation (i.e. about the source, in world axes) plus a world
translation of the source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError

BOX_MIN = np.full(3, -0.5)
BOX_MAX = np.full(3, 0.5)


@dataclass(frozen=True)
class Intrinsics:
    detector_width_px: int
    detector_height_px: int
    pixel_pitch: float
    source_to_detector_distance: float
    principal_point: tuple[float, float] | None = None

    def __post_init__(self):
        if self.detector_width_px < 1 or self.detector_height_px < 1:
            raise ConfigurationError("detector dimensions must be >= 1 pixel")
        if not self.pixel_pitch > 0:
            raise ConfigurationError("pixel_pitch must be > 0")
        if not self.source_to_detector_distance > 0:
            raise ConfigurationError("source_to_detector_distance must be > 0")
        if self.principal_point is None:
            pp = ((self.detector_width_px - 1) / 2.0, (self.detector_height_px - 1) / 2.0)
            object.__setattr__(self, "principal_point", pp)
        else:
            object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    @property
    def shape(self):
        """Image array shape ``(rows, cols)``."""
        return (self.detector_height_px, self.detector_width_px)

    def scanner_points(self, pixels):
        """Detector points in scanner coordinates for ``(..., 2)`` pixel positions ``(u, v)``."""
        pixels = np.asarray(pixels, dtype=np.float64)
        out = np.empty(pixels.shape[:-1] + (3,))
        out[..., 0] = (pixels[..., 0] - self.principal_point[0]) * self.pixel_pitch
        out[..., 1] = (pixels[..., 1] - self.principal_point[1]) * self.pixel_pitch
        out[..., 2] = self.source_to_detector_distance
        return out

    def to_dict(self):
        return {
            "detector_width_px": self.detector_width_px,
            "detector_height_px": self.detector_height_px,
            "pixel_pitch": self.pixel_pitch,
            "source_to_detector_distance": self.source_to_detector_distance,
            "principal_point": list(self.principal_point),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["detector_width_px"]),
            int(d["detector_height_px"]),
            float(d["pixel_pitch"]),
            float(d["source_to_detector_distance"]),
            tuple(d["principal_point"]),
        )


def fit_intrinsics(width, height, radius, source_to_detector_distance=None, margin=1.02):
    """Intrinsics whose field of view just covers the unit cube's bounding sphere.

    The detector is placed symmetrically behind the rotation axis
    (``source_to_detector_distance = 2 * radius``) unless given.
    """
    if radius <= math.sqrt(3) / 2:
        raise ConfigurationError("source radius must lie outside the reconstruction cube")
    sdd = 2.0 * radius if source_to_detector_distance is None else source_to_detector_distance
    half = sdd * math.tan(math.asin((math.sqrt(3) / 2) / radius)) * margin
    pitch = 2.0 * half / min(width, height)
    return Intrinsics(int(width), int(height), pitch, sdd)


# --------------------------------------------------------------------------
# rotation helpers

def skew(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _exp_coeffs(theta):
    # sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series below 1e-4
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def so3_exp(omega):
    """Rodrigues map from axis-angle vectors ``(..., 3)`` to rotation matrices."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    a, b, _ = _exp_coeffs(theta)
    K = skew(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_left_jacobian(omega):
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    _, b, c = _exp_coeffs(theta)
    K = skew(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_log(R):
    """Axis-angle vector of rotation matrices ``(..., 3, 3)``."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    s = np.sin(theta)
    scale = np.where(s > 1e-12, theta / (2.0 * np.where(s > 1e-12, s, 1.0)), 0.5)
    return w * scale[..., None]


def rotation_angle(R):
    """Rotation angle (radians) of matrices ``(..., 3, 3)``."""
    return np.linalg.norm(so3_log(R), axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R):
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


# --------------------------------------------------------------------------
# poses and rays

@dataclass
class ViewPose:
    rotation: np.ndarray  # unit quaternion (w, x, y, z), world-from-scanner
    source_position: np.ndarray
    pose_delta_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pose_delta_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.source_position = np.asarray(self.source_position, dtype=np.float64)
        self.pose_delta_rotation = np.asarray(self.pose_delta_rotation, dtype=np.float64)
        self.pose_delta_translation = np.asarray(self.pose_delta_translation, dtype=np.float64)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise InputError("pose rotation must be a unit quaternion")

    def effective_rotation(self):
        base = quat_to_matrix(self.rotation)
        if not self.pose_delta_rotation.any():
            return base
        return so3_exp(self.pose_delta_rotation) @ base

    def effective_source(self):
        return self.source_position + self.pose_delta_translation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]
    view_id: int

    def at(self, t):
        return self.origin + t * self.direction


def make_circular_trajectory(n_views, angular_range, radius, intrinsics=None, start_angle=0.0):
    """Source positions equally spaced on a circle about the vertical (z) axis.

    Angles are ``start_angle + k * angular_range / n_views`` (half-open), so a
    full circle never repeats its first view. The scanner looks at the origin
    with detector rows pointing down the z axis.
    """
    if n_views < 1:
        raise ConfigurationError("n_views must be >= 1")
    if not 0 < angular_range <= 2 * math.pi + 1e-12:
        raise ConfigurationError("angular_range must be in (0, 2*pi]")
    if radius <= 0:
        raise ConfigurationError("radius must be > 0")
    poses = []
    for k in range(n_views):
        a = start_angle + k * angular_range / n_views
        c, s = math.cos(a), math.sin(a)
        e_z = np.array([-c, -s, 0.0])
        e_v = np.array([0.0, 0.0, -1.0])
        e_u = np.cross(e_v, e_z)
        R = np.stack([e_u, e_v, e_z], axis=1)
        poses.append(ViewPose(matrix_to_quat(R), radius * np.array([c, s, 0.0])))
    return poses


def trajectory_angle(pose):
    """Turntable angle (radians, in [0, 2*pi)) of a pose's source position."""
    p = pose.effective_source()
    return math.atan2(p[1], p[0]) % (2 * math.pi)


def generate_ray(pose, intrinsics, pixel, jitter=None, view_id=0):
    u, v = pixel
    if not (0 <= u < intrinsics.detector_width_px and 0 <= v < intrinsics.detector_height_px):
        raise InputError(f"pixel {pixel} outside detector")
    pos = np.array([u, v], dtype=np.float64)
    if jitter is not None:
        pos = pos + np.asarray(jitter, dtype=np.float64) - 0.5
    w = pose.effective_rotation() @ intrinsics.scanner_points(pos)
    return Ray(pose.effective_source(), w / np.linalg.norm(w), (int(u), int(v)), view_id)


def intersect_aabb(ray, box_min=BOX_MIN, box_max=BOX_MAX):
    """Slab test; returns ``(t_near, t_far)`` clipped to ``t >= 0`` or ``None``."""
    t0, t1 = intersect_aabb_batch(ray.origin[None], ray.direction[None], box_min, box_max)
    if not t0[0] < t1[0]:
        return None
    return float(t0[0]), float(t1[0])


def intersect_aabb_batch(origins, directions, box_min=BOX_MIN, box_max=BOX_MAX):
    """Vectorized slab test. Misses come back with ``t_near >= t_far``."""
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / directions
        ta = (box_min - origins) * inv
        tb = (box_max - origins) * inv
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    # axis-parallel rays: inside the slab means unconstrained, outside means miss
    par = directions == 0.0
    inside = (origins >= box_min) & (origins <= box_max)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    return t_near, t_far


class Geometry:
    """Array form of all view poses, used by the batched renderer.

    ``delta_rot`` and ``delta_trans`` are the learnable pose corrections,
    shaped ``(n_views, 3)``.
    """

    def __init__(self, poses, intrinsics):
        self.intrinsics = intrinsics
        self.base_rotation = np.stack([quat_to_matrix(p.rotation) for p in poses])
        self.base_source = np.stack([p.source_position for p in poses])
        self.delta_rot = np.stack([p.pose_delta_rotation for p in poses]).copy()
        self.delta_trans = np.stack([p.pose_delta_translation for p in poses]).copy()

    @property
    def n_views(self):
        return len(self.base_source)

    def poses(self):
        return [
            ViewPose(matrix_to_quat(R), s.copy(), dr.copy(), dt.copy())
            for R, s, dr, dt in zip(self.base_rotation, self.base_source, self.delta_rot, self.delta_trans)
        ]

    def effective_rotations(self):
        return so3_exp(self.delta_rot) @ self.base_rotation

    def effective_sources(self):
        return self.base_source + self.delta_trans

    def rays(self, view_ids, pixels, jitter=None):
        """Origins and unit directions for pixel positions ``(n, 2)`` of the given views.

        Returns ``(origins, directions, cache)``; ``cache`` feeds ``rays_vjp``.
        """
        view_ids = np.asarray(view_ids, dtype=np.int64)
        pos = np.asarray(pixels, dtype=np.float64)
        if jitter is not None:
            pos = pos + jitter - 0.5
        p_s = self.intrinsics.scanner_points(pos)
        v = np.einsum("nij,nj->ni", self.base_rotation[view_ids], p_s)
        E = so3_exp(self.delta_rot)
        w = np.einsum("nij,nj->ni", E[view_ids], v)
        norm = np.linalg.norm(w, axis=1)
        d = w / norm[:, None]
        o = self.effective_sources()[view_ids]
        return o, d, (view_ids, w, norm, d)

    def rays_vjp(self, cache, g_origin, g_direction):
        """Pull ray-space gradients back to ``(g_delta_rot, g_delta_trans)``."""
        view_ids, w, norm, d = cache
        n_views = self.n_views
        g_trans = np.zeros((n_views, 3))
        for k in range(3):
            g_trans[:, k] = np.bincount(view_ids, weights=g_origin[:, k], minlength=n_views)
        # d = w/|w|  ->  dL/dw = (g - d (d.g)) / |w|
        g_w = (g_direction - d * np.sum(d * g_direction, axis=1, keepdims=True)) / norm[:, None]
        # dw/domega = -[w]_x J_l(omega)  ->  dL/domega = J_l^T [w]_x g_w = J_l^T (w x g_w)
        cr = np.cross(w, g_w)
        acc = np.zeros((n_views, 3))
        for k in range(3):
            acc[:, k] = np.bincount(view_ids, weights=cr[:, k], minlength=n_views)
        J = so3_left_jacobian(self.delta_rot)
        g_rot = np.einsum("vji,vj->vi", J, acc)
        return g_rot, g_trans
