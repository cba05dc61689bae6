import numpy as np
import pytest

from rslf.errors import ArgumentError, BehindCameraError
from rslf.geometry import (
    MotionParams,
    Point3,
    cross_matrix,
    deform_to_static,
    deform_to_static_many,
    disparity_to_point,
    point_to_disparity,
    points_from_disparity,
    project_points,
    reimage_at,
    reimage_at_many,
    rodrigues,
    rotation_stack,
    rotation_vector_jacobian,
    rotation_vector_jacobian_stack,
)
from rslf.lightfield import LFIntrinsics


@pytest.fixture
def intr():
    # 128 px sensor: f = F * W / w = 128, beta = b * F * 128
    return LFIntrinsics(f=128.0, u0=64.0, v0=64.0, w=4.0, F=4.0, b=0.03, Pf=2.0)


class TestDisparityPoint:
    def test_zero_disparity_hits_focal_plane(self, intr):
        p = disparity_to_point(80.0, 50.0, 0.0, intr)
        assert p.z == pytest.approx(intr.Pf, abs=0.0)

    def test_principal_point_on_axis(self, intr):
        p = disparity_to_point(intr.u0, intr.v0, 0.7, intr)
        assert p.x == 0.0 and p.y == 0.0

    def test_round_trip_1000_random(self, intr):
        rng = np.random.default_rng(7)
        d_floor = -intr.beta / (intr.Pf * intr.w)  # behind-camera bound
        for _ in range(1000):
            u = rng.uniform(0, 128)
            v = rng.uniform(0, 128)
            d = rng.uniform(0.95 * d_floor, 2.0)
            p = disparity_to_point(u, v, d, intr)
            u2, v2, d2 = point_to_disparity(p, intr)
            assert abs(u2 - u) < 1e-9
            assert abs(v2 - v) < 1e-9
            assert abs(d2 - d) < 1e-9

    def test_far_points_negative_disparity(self, intr):
        _, _, d = point_to_disparity(Point3(0.1, 0.0, 3.5), intr)
        assert d < 0.0

    def test_focal_plane_inverse(self, intr):
        u, v, d = point_to_disparity(Point3(0.0, 0.0, intr.Pf), intr)
        assert (u, v) == (intr.u0, intr.v0)
        assert d == 0.0

    def test_behind_camera_raises_with_disparity(self, intr):
        # denominator d*Pf*w + beta <= 0  <=>  d <= -beta/(Pf*w)
        bad = -intr.beta / (intr.Pf * intr.w) - 0.1
        with pytest.raises(BehindCameraError) as exc:
            disparity_to_point(10.0, 10.0, bad, intr)
        assert exc.value.disparity == pytest.approx(bad)
        with pytest.raises(BehindCameraError):
            point_to_disparity(Point3(0.0, 0.0, -1.0), intr)

    def test_vectorized_matches_scalar(self, intr):
        rng = np.random.default_rng(3)
        pts = np.stack(
            [rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50), rng.uniform(0.5, 4, 50)],
            axis=1,
        )
        u, v, d = project_points(pts, intr)
        for i in range(50):
            ui, vi, di = point_to_disparity(Point3.from_array(pts[i]), intr)
            assert np.allclose([u[i], v[i], d[i]], [ui, vi, di], atol=1e-12)
        back = points_from_disparity(u, v, d, intr)
        assert np.allclose(back, pts, atol=1e-9)


class TestRodrigues:
    def test_zero_is_identity(self):
        assert np.array_equal(rodrigues((0.0, 0.0, 0.0)), np.eye(3))

    def test_quarter_turn_about_z(self):
        R = rodrigues((0.0, 0.0, np.pi / 2))
        assert np.allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_orthogonality_500_random(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            R = rodrigues(rng.uniform(-np.pi, np.pi, 3))
            assert np.allclose(R.T @ R, np.eye(3), atol=1e-10)
            assert abs(np.linalg.det(R) - 1.0) < 1e-10

    def test_continuity_at_zero(self):
        e = np.array([0.3, -0.5, 0.81])
        e /= np.linalg.norm(e)
        for eps in (1e-3, 1e-4, 1e-5):
            lin = np.eye(3) + eps * cross_matrix(e)
            err = np.linalg.norm(rodrigues(eps * e) - lin)
            assert err <= 2.0 * eps**2

    def test_rotation_stack_matches_scalar(self):
        rng = np.random.default_rng(5)
        omega = rng.uniform(-1, 1, 3)
        scales = rng.uniform(-0.8, 0.8, 40)
        Rs = rotation_stack(omega, scales)
        for i, c in enumerate(scales):
            assert np.allclose(Rs[i], rodrigues(c * omega), atol=1e-12)

    def test_rotation_stack_zero_omega_exact_identity(self):
        Rs = rotation_stack(np.zeros(3), np.array([-0.5, 0.0, 0.3]))
        for R in Rs:
            assert np.array_equal(R, np.eye(3))


class TestMotionModel:
    def test_static_motion_identity(self):
        p = Point3(0.4, -0.2, 1.7)
        m = MotionParams()
        for tau in (-0.5, 0.0, 0.37):
            assert deform_to_static(p, tau, m).as_array() == pytest.approx(p.as_array())
            assert reimage_at(p, tau, m).as_array() == pytest.approx(p.as_array())

    def test_time_origin_identity(self):
        m = MotionParams(omega=(0.1, -0.2, 0.3), vel=(0.5, 0.0, -0.1))
        p = Point3(1.0, 2.0, 3.0)
        assert np.allclose(deform_to_static(p, 0.0, m).as_array(), p.as_array())
        assert np.allclose(reimage_at(p, 0.0, m).as_array(), p.as_array())

    def test_pure_translation_closed_form(self):
        m = MotionParams(vel=(1.0, 0.0, 0.0))
        ps = deform_to_static(Point3(0.0, 0.0, 2.0), 0.5, m)
        assert ps.as_array() == pytest.approx([-0.5, 0.0, 2.0])

    def test_reimage_inverts_deform_1000_random(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(1000):
            p = Point3(*rng.uniform(-2, 2, 3))
            tau = rng.uniform(-0.5, 0.5)
            m = MotionParams(tuple(rng.uniform(-2, 2, 3)), tuple(rng.uniform(-1, 1, 3)))
            back = reimage_at(deform_to_static(p, tau, m), tau, m)
            worst = max(worst, float(np.max(np.abs(back.as_array() - p.as_array()))))
        assert worst < 1e-10

    def test_group_composition_single_axis(self):
        # About a shared axis, deform(tau) then reimage(tau') rotates by
        # (tau' - tau) * omega.
        omega = np.array([0.0, 0.0, 0.9])
        m = MotionParams(tuple(omega), (0.0, 0.0, 0.0))
        p = Point3(0.7, -0.4, 2.2)
        tau, tau2 = 0.31, -0.12
        got = reimage_at(deform_to_static(p, tau, m), tau2, m).as_array()
        expect = rodrigues((tau2 - tau) * omega) @ p.as_array()
        assert np.allclose(got, expect, atol=1e-12)

    def test_vectorized_paths_match_scalar(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(-1, 1, (30, 3)) + np.array([0, 0, 2.0])
        taus = rng.uniform(-0.5, 0.5, 30)
        m = MotionParams((0.2, -0.4, 0.1), (0.3, 0.05, -0.2))
        stat = deform_to_static_many(pts, taus, m)
        for i in range(30):
            ref = deform_to_static(Point3.from_array(pts[i]), taus[i], m)
            assert np.allclose(stat[i], ref.as_array(), atol=1e-12)
        re = reimage_at_many(stat, 0.27, m)
        for i in range(30):
            ref = reimage_at(Point3.from_array(stat[i]), 0.27, m)
            assert np.allclose(re[i], ref.as_array(), atol=1e-12)

    def test_motion_validation(self):
        with pytest.raises(ArgumentError):
            MotionParams(omega=(np.nan, 0.0, 0.0))
        assert MotionParams(omega=(3.5, 0, 0)).magnitude_warning() is not None
        assert MotionParams(omega=(0.5, 0, 0)).magnitude_warning() is None


class TestRotationJacobian:
    def test_against_finite_differences(self):
        rng = np.random.default_rng(13)
        h = 1e-6
        for _ in range(50):
            theta = rng.uniform(-2, 2, 3)
            a = rng.uniform(-3, 3, 3)
            J = rotation_vector_jacobian(theta, a)
            for k in range(3):
                tp = theta.copy(); tp[k] += h
                tm = theta.copy(); tm[k] -= h
                fd = (rodrigues(tp) @ a - rodrigues(tm) @ a) / (2 * h)
                assert np.allclose(J[:, k], fd, atol=1e-6)

    def test_zero_angle_limit(self):
        a = np.array([1.0, -2.0, 0.5])
        J = rotation_vector_jacobian(np.zeros(3), a)
        assert np.allclose(J, -cross_matrix(a))

    def test_stack_matches_scalar_with_scale_chain(self):
        rng = np.random.default_rng(17)
        omega = rng.uniform(-1.5, 1.5, 3)
        scales = np.concatenate([rng.uniform(-0.5, 0.5, 20), [0.0, 1e-14]])
        pts = rng.uniform(-2, 2, (22, 3))
        J = rotation_vector_jacobian_stack(omega, scales, pts)
        h = 1e-7
        for i in range(22):
            for k in range(3):
                wp = omega.copy(); wp[k] += h
                wm = omega.copy(); wm[k] -= h
                fd = (
                    rodrigues(scales[i] * wp) @ pts[i]
                    - rodrigues(scales[i] * wm) @ pts[i]
                ) / (2 * h)
                assert np.allclose(J[i][:, k], fd, atol=1e-5), (i, k)
