"""Self-calibration switches, pose-noise injection and calibration reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .geometry import ViewPose, matrix_to_quat, rotation_angle, skew, so3_exp

RADIOMETRIC_PARTS = ("exposure", "bias", "response", "background")


@dataclass(frozen=True)
class CalibrationConfig:
    geometric: bool = False
    exposure: bool = False
    bias: bool = False
    response: bool = False
    background: bool = False
    warmup_epochs: int = 2
    pose_noise_rot: float = 0.0  # radians
    pose_noise_trans: float = 0.0  # world units
    pose_noise_seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be >= 0")
        if self.pose_noise_rot < 0 or self.pose_noise_trans < 0:
            raise ConfigurationError("pose noise levels must be >= 0")

    @property
    def any_enabled(self):
        return self.geometric or any(getattr(self, k) for k in RADIOMETRIC_PARTS)

    def parts(self, epoch):
        """Calibration parameter names to optimize at ``epoch`` (empty during warmup)."""
        if epoch < self.warmup_epochs:
            return set()
        out = {k for k in RADIOMETRIC_PARTS if getattr(self, k)}
        if self.geometric:
            out.add("poses")
        return out


def random_rotations(n, sigma, rng):
    """Axis-angle vectors with uniformly random axes and ``N(0, sigma)`` angles."""
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    return axis * rng.normal(0.0, sigma, size=(n, 1))


def perturb_poses(poses, sigma_rot, sigma_trans, seed=0, views=None):
    """Copies of ``poses`` with Gaussian noise baked into the base pose and zero deltas.

    Rotation noise is a rotation about a uniformly random axis through the
    source by an angle drawn from ``N(0, sigma_rot)``; translation noise is
    ``N(0, sigma_trans)`` per coordinate. With ``views``, only those poses are
    perturbed (the draws for a view do not depend on the selection).
    """
    if sigma_rot < 0 or sigma_trans < 0:
        raise ConfigurationError("noise levels must be >= 0")
    rng = np.random.default_rng(seed)
    n = len(poses)
    omega = random_rotations(n, sigma_rot, rng)
    tau = rng.normal(0.0, sigma_trans, size=(n, 3))
    chosen = np.ones(n, dtype=bool) if views is None else np.isin(np.arange(n), views)
    out = []
    for p, w, t, c in zip(poses, omega, tau, chosen):
        R = p.effective_rotation()
        s = p.effective_source()
        if not c:
            out.append(ViewPose(matrix_to_quat(R), s))
            continue
        if sigma_rot > 0:
            R = so3_exp(w) @ R
        if sigma_trans > 0:
            s = s + t
        out.append(ViewPose(matrix_to_quat(R), s))
    return out


def rigid_gauge_component(delta_rot, delta_trans, sources):
    """Least-squares global rigid motion ``(omega, tau)`` explained by pose deltas.

    To first order a world motion ``(omega, tau)`` moves every view by
    ``delta_rot = omega`` and ``delta_trans = omega x s + tau``, where ``s``
    is the view's source. Returns the per-view deltas of the best fit.
    """
    n = len(sources)
    J = np.zeros((n, 6, 6))
    J[:, :3, :3] = np.eye(3)
    J[:, 3:, :3] = -skew(sources)
    J[:, 3:, 3:] = np.eye(3)
    y = np.concatenate([delta_rot, delta_trans], axis=1)
    x = np.linalg.lstsq(J.reshape(-1, 6), y.reshape(-1), rcond=None)[0]
    fit = J @ x
    return fit[:, :3], fit[:, 3:]


def project_points(R, source, intrinsics, points):
    """Detector ``(u, v)`` of world points seen from one pose (pinhole at the source)."""
    q = (np.asarray(points) - source) @ R  # scanner coordinates
    f = intrinsics.source_to_detector_distance / q[:, 2]
    u = q[:, 0] * f / intrinsics.pixel_pitch + intrinsics.principal_point[0]
    v = q[:, 1] * f / intrinsics.pixel_pitch + intrinsics.principal_point[1]
    return np.stack([u, v], axis=1)


_PROBE = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)] + [[0.0, 0.0, 0.0]])


def pose_errors(rotations, sources, true_poses, intrinsics=None):
    """Per-view rotation error (degrees), source distance and, with intrinsics,
    the mean detector displacement (pixels) of the cube corners and centre."""
    rot, trans, reproj = [], [], []
    for R, s, p in zip(rotations, sources, true_poses):
        Rt = p.effective_rotation()
        st = p.effective_source()
        rot.append(np.degrees(rotation_angle(R @ Rt.T)))
        trans.append(float(np.linalg.norm(s - st)))
        if intrinsics is not None:
            a = project_points(R, s, intrinsics, _PROBE)
            b = project_points(Rt, st, intrinsics, _PROBE)
            reproj.append(float(np.mean(np.linalg.norm(a - b, axis=1))))
    return np.array(rot), np.array(trans), (np.array(reproj) if intrinsics is not None else None)


def calibration_report(geometry, true_poses=None, radiometry=None, views=None, before=None):
    """Summary of the calibration state.

    ``geometry`` is the optimized ``Geometry``; ``before`` an optional
    ``Geometry`` (or pose list) holding the starting calibration.
    """
    views = np.arange(geometry.n_views) if views is None else np.asarray(views)
    rep = {"views": [int(v) for v in views]}
    intr = geometry.intrinsics
    if true_poses is not None:
        R = geometry.effective_rotations()[views]
        S = geometry.effective_sources()[views]
        tp = [true_poses[v] for v in views]
        r, t, px = pose_errors(R, S, tp, intr)
        rep.update(rotation_error_deg=r.tolist(), translation_error=t.tolist(), reprojection_error_px=px.tolist(),
                   median_rotation_error_deg=float(np.median(r)), median_translation_error=float(np.median(t)),
                   median_reprojection_error_px=float(np.median(px)))
        if before is not None:
            if isinstance(before, list):
                Rb = np.stack([before[v].effective_rotation() for v in views])
                Sb = np.stack([before[v].effective_source() for v in views])
            else:
                Rb = before.effective_rotations()[views]
                Sb = before.effective_sources()[views]
            r0, t0, px0 = pose_errors(Rb, Sb, tp, intr)
            rep.update(initial_rotation_error_deg=r0.tolist(), initial_translation_error=t0.tolist(),
                       initial_reprojection_error_px=px0.tolist(),
                       initial_median_rotation_error_deg=float(np.median(r0)),
                       initial_median_translation_error=float(np.median(t0)),
                       initial_median_reprojection_error_px=float(np.median(px0)))
    if radiometry is not None:
        rep.update(exposure=np.exp(radiometry.exposure[views]).tolist(), bias=radiometry.bias[views].tolist(),
                   response_knots=radiometry.knot_values().tolist(),
                   background_abs_mean=float(np.abs(radiometry.background).mean()))
    return rep


def apply_radiometric_jitter(dataset, exposure_sigma, bias_sigma, seed=0, views=None):
    """Multiply view images by ``exp(N(0, exposure_sigma))`` and add ``N(0, bias_sigma)``.

    Returns ``(new dataset, gains, biases)``. Only ``views`` (default: all)
    are altered.
    """
    rng = np.random.default_rng(seed)
    n = dataset.n_views
    gains = np.exp(rng.normal(0.0, exposure_sigma, n))
    biases = rng.normal(0.0, bias_sigma, n)
    mask = np.zeros(n, dtype=bool)
    mask[np.arange(n) if views is None else np.asarray(views)] = True
    gains[~mask] = 1.0
    biases[~mask] = 0.0
    out = dataset.copy()
    out.images = (out.images.astype(np.float64) * gains[:, None, None] + biases[:, None, None]).astype(np.float32)
    out.provenance.update(exposure_jitter=float(exposure_sigma), bias_jitter=float(bias_sigma), jitter_seed=int(seed))
    return out, gains, biases
