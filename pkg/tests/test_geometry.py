import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octomo.errors import ConfigurationError, InputError
from octomo.geometry import (Geometry, Intrinsics, Ray, ViewPose, fit_intrinsics, generate_ray, intersect_aabb,
                             intersect_aabb_batch, make_circular_trajectory, matrix_to_quat, quat_to_matrix,
                             so3_exp, so3_log, trajectory_angle)


def _angles(poses):
    return sorted(round(math.degrees(trajectory_angle(p)), 9) for p in poses)


def test_trajectory_four_views_full_circle():
    assert _angles(make_circular_trajectory(4, 2 * math.pi, 2.0)) == [0, 90, 180, 270]


def test_trajectory_single_view():
    poses = make_circular_trajectory(1, 2 * math.pi, 2.0)
    assert len(poses) == 1 and _angles(poses) == [0]


def test_trajectory_half_open_spacing():
    assert _angles(make_circular_trajectory(3, math.pi / 2, 2.0)) == pytest.approx([0, 30, 60])


def test_trajectory_radius_and_unit_rotation():
    for p in make_circular_trajectory(7, 2 * math.pi, 3.0):
        assert np.linalg.norm(p.source_position) == pytest.approx(3.0, abs=1e-12)
        assert abs(np.linalg.norm(p.rotation) - 1) < 1e-9


@pytest.mark.parametrize("args", [(0, 1.0, 2.0), (3, 0.0, 2.0), (3, 7.0, 2.0), (3, 1.0, -1.0)])
def test_trajectory_rejects_bad_arguments(args):
    with pytest.raises(ConfigurationError):
        make_circular_trajectory(*args)


def test_intrinsics_validation():
    with pytest.raises(ConfigurationError):
        Intrinsics(0, 4, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        Intrinsics(4, 4, 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        Intrinsics(4, 4, 1.0, -2.0)


def test_intrinsics_roundtrip():
    intr = fit_intrinsics(16, 12, 2.0)
    assert Intrinsics.from_dict(intr.to_dict()) == intr
    assert intr.shape == (12, 16)


def test_non_unit_quaternion_rejected():
    with pytest.raises(InputError):
        ViewPose(np.array([1.0, 0.1, 0, 0]), np.zeros(3))


def test_principal_point_ray_is_detector_normal():
    intr = Intrinsics(5, 5, 0.1, 4.0)
    pose = make_circular_trajectory(1, 2 * math.pi, 2.0)[0]
    ray = generate_ray(pose, intr, (2, 2))
    normal = quat_to_matrix(pose.rotation)[:, 2]
    assert np.allclose(ray.direction, normal, atol=1e-15)
    assert np.allclose(ray.direction, -pose.source_position / 2.0)


def test_translation_delta_shifts_origin_exactly():
    intr = fit_intrinsics(4, 4, 2.0)
    pose = make_circular_trajectory(1, 2 * math.pi, 2.0)[0]
    eps = 1e-3
    moved = ViewPose(pose.rotation, pose.source_position, pose_delta_translation=np.array([eps, 0, 0]))
    a, b = generate_ray(pose, intr, (1, 2)), generate_ray(moved, intr, (1, 2))
    assert np.array_equal(b.origin - a.origin, np.array([b.origin[0] - a.origin[0], 0, 0]))
    assert b.origin[0] - a.origin[0] == pytest.approx(eps, abs=1e-15)
    assert np.array_equal(a.direction, b.direction)


def test_zero_delta_effective_pose_equals_base():
    pose = make_circular_trajectory(3, 2 * math.pi, 2.0)[1]
    assert np.array_equal(pose.effective_rotation(), quat_to_matrix(pose.rotation))
    assert np.array_equal(pose.effective_source(), pose.source_position)


def test_generate_ray_deterministic_and_bounds():
    intr = fit_intrinsics(4, 4, 2.0)
    pose = make_circular_trajectory(1, 2 * math.pi, 2.0)[0]
    a, b = generate_ray(pose, intr, (3, 1)), generate_ray(pose, intr, (3, 1))
    assert np.array_equal(a.direction, b.direction) and np.array_equal(a.origin, b.origin)
    with pytest.raises(InputError):
        generate_ray(pose, intr, (4, 0))


def test_batched_rays_match_single_rays():
    intr = fit_intrinsics(6, 5, 2.0)
    poses = make_circular_trajectory(3, 2 * math.pi, 2.0)
    rng = np.random.default_rng(1)
    for p in poses:
        p.pose_delta_rotation[:] = rng.normal(0, 0.02, 3)
        p.pose_delta_translation[:] = rng.normal(0, 0.02, 3)
    geo = Geometry(poses, intr)
    vid = np.array([0, 1, 2, 2])
    px = np.array([[0, 0], [5, 4], [2, 3], [1, 1]])
    o, d, _ = geo.rays(vid, px)
    for i in range(4):
        r = generate_ray(poses[vid[i]], intr, tuple(px[i]))
        assert np.allclose(o[i], r.origin, atol=1e-14)
        assert np.allclose(d[i], r.direction, atol=1e-14)


def test_direction_gradient_wrt_rotation_delta_matches_central_differences():
    # oracle: central differences of generate_ray itself, step 1e-6, double precision
    intr = fit_intrinsics(4, 4, 2.0)
    poses = make_circular_trajectory(2, 2 * math.pi, 2.0, start_angle=0.4)
    rng = np.random.default_rng(3)
    poses[1].pose_delta_rotation[:] = rng.normal(0, 0.05, 3)
    geo = Geometry(poses, intr)
    vid = np.array([1, 1, 0])
    px = np.array([[0, 3], [2, 1], [3, 3]])
    g_dir = rng.normal(size=(3, 3))
    _, _, cache = geo.rays(vid, px)
    g_rot, _ = geo.rays_vjp(cache, np.zeros((3, 3)), g_dir)
    h = 1e-6
    fd = np.zeros((2, 3))
    for v in range(2):
        for k in range(3):
            old = geo.delta_rot[v, k]
            geo.delta_rot[v, k] = old + h
            _, dp, _ = geo.rays(vid, px)
            geo.delta_rot[v, k] = old - h
            _, dm, _ = geo.rays(vid, px)
            geo.delta_rot[v, k] = old
            fd[v, k] = np.sum((dp - dm) * g_dir) / (2 * h)
    assert np.linalg.norm(fd - g_rot) / np.linalg.norm(fd) < 1e-4


def test_translation_gradient_sums_origin_gradients():
    intr = fit_intrinsics(4, 4, 2.0)
    geo = Geometry(make_circular_trajectory(2, 2 * math.pi, 2.0), intr)
    vid = np.array([0, 1, 1])
    _, _, cache = geo.rays(vid, np.zeros((3, 2)))
    g_o = np.arange(9.0).reshape(3, 3)
    _, g_t = geo.rays_vjp(cache, g_o, np.zeros((3, 3)))
    assert np.array_equal(g_t, np.array([[0, 1, 2], [9, 11, 13]], dtype=float))


def test_intersect_axial_ray():
    r = Ray(np.array([-2.0, 0, 0]), np.array([1.0, 0, 0]), (0, 0), 0)
    assert intersect_aabb(r) == (1.5, 2.5)


def test_intersect_miss_pointing_away():
    r = Ray(np.array([-2.0, 0, 0]), np.array([-1.0, 0, 0]), (0, 0), 0)
    assert intersect_aabb(r) is None


def test_intersect_origin_inside_clips_to_zero():
    r = Ray(np.array([0.1, 0.0, -0.2]), np.array([0.0, 1.0, 0.0]), (0, 0), 0)
    t0, t1 = intersect_aabb(r)
    assert t0 == 0.0 and t1 == pytest.approx(0.5)


unit = st.floats(-1, 1, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.tuples(unit, unit, unit), st.tuples(unit, unit, unit), st.floats(0, 1))
def test_points_inside_box_for_hits(o, d, s):
    o = 2.0 * np.array(o)
    d = np.array(d)
    if np.linalg.norm(d) < 1e-3:
        return
    d /= np.linalg.norm(d)
    t0, t1 = intersect_aabb_batch(o[None], d[None])
    if not t0[0] < t1[0]:
        return
    p = o + (t0[0] + s * (t1[0] - t0[0])) * d
    assert np.all(p >= -0.5 - 1e-9) and np.all(p <= 0.5 + 1e-9)


@settings(max_examples=100, deadline=None)
@given(st.tuples(unit, unit, unit), st.floats(0, 3))
def test_so3_exp_log_roundtrip(axis, angle):
    a = np.array(axis)
    if np.linalg.norm(a) < 1e-3:
        return
    w = a / np.linalg.norm(a) * angle
    R = so3_exp(w)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.allclose(so3_log(R), w, atol=1e-8)


def test_quaternion_matrix_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        q2 = matrix_to_quat(quat_to_matrix(q))
        assert np.allclose(q2 * np.sign(q2[0]), q * np.sign(q[0]), atol=1e-12)
