"""Closed-form geometry for rolling-shutter light fields.

Everything here is a pure function of immutable values:

* the disparity <-> 3D point conversion tied to the light-field focal
  plane (normalized disparity d is the per-view pixel shift; d = 0 on
  the focal plane at Z = Pf),
* Rodrigues' rotation with a series branch at zero angle,
* the constant-velocity deformation model: a point observed at time tau
  is carried back to its static (tau = 0) position and re-imaged at an
  arbitrary band time.

The motion convention is "scene moves forward": a static point Q sits at
``R(tau * omega) @ Q + tau * vel`` at time tau.  ``deform_to_static`` is the
exact inverse of that map and ``reimage_at`` is the forward map, so
``reimage_at(deform_to_static(P, tau, m), tau, m) == P`` holds to machine
precision for every motion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, BehindCameraError

# Angle below which rotations fall back to their second-order series.
_SMALL_ANGLE = 1e-12


@dataclass(frozen=True)
class Point3:
    """A 3D point in scene units, camera frame (Z along the optical axis)."""

    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_array(a: np.ndarray) -> "Point3":
        return Point3(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class MotionParams:
    """Constant 6-DoF velocity: omega in rad and vel in scene units, both
    per normalized frame-readout time."""

    omega: tuple[float, float, float] = (0.0, 0.0, 0.0)
    vel: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=np.float64)
        v = np.asarray(self.vel, dtype=np.float64)
        if w.shape != (3,) or v.shape != (3,):
            raise ArgumentError("omega and vel must be 3-vectors")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise ArgumentError("motion parameters must be finite")

    @property
    def omega_array(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=np.float64)

    @property
    def vel_array(self) -> np.ndarray:
        return np.asarray(self.vel, dtype=np.float64)

    def is_zero(self) -> bool:
        return not (np.any(self.omega_array) or np.any(self.vel_array))

    def magnitude_warning(self) -> str | None:
        """Rotation beyond pi per readout is outside the supported regime."""
        n = float(np.linalg.norm(self.omega_array))
        if n >= np.pi:
            return f"|omega| = {n:.3f} rad/frame exceeds pi; estimate unreliable"
        return None


def cross_matrix(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [v]_x such that [v]_x @ a == cross(v, a)."""
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix for an axis-angle 3-vector.

    Below ``_SMALL_ANGLE`` the second-order series I + K + K^2/2 is used,
    which avoids dividing by the vanishing angle.  The (1 - cos) / theta^2
    factor is evaluated as 0.5 * sinc(theta/2)^2 to dodge cancellation.
    """
    theta_vec = np.asarray(axis_angle, dtype=np.float64)
    if theta_vec.shape != (3,):
        raise ArgumentError("axis_angle must be a 3-vector")
    if not np.all(np.isfinite(theta_vec)):
        raise ArgumentError("axis_angle must be finite")
    theta = float(np.linalg.norm(theta_vec))
    K = cross_matrix(theta_vec)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    # sin(t)/t and (1-cos t)/t^2 with stable half-angle form.
    a = np.sin(theta) / theta
    half = 0.5 * theta
    b = 0.5 * (np.sin(half) / half) ** 2
    return np.eye(3) + a * K + b * (K @ K)


def rotate_about_axis(axis_unit: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Stack of rotations about one shared unit axis, one per signed angle.

    Returns an array of shape (n, 3, 3).  Used to apply per-row or
    per-Gaussian rotations ``R(c_j * omega)`` without materializing a
    Rodrigues call per element.
    """
    k = np.asarray(axis_unit, dtype=np.float64)
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    K = cross_matrix(k)
    K2 = K @ K
    s = np.sin(angles)[:, None, None]
    c = (1.0 - np.cos(angles))[:, None, None]
    return np.eye(3)[None] + s * K[None] + c * K2[None]


def rotation_stack(omega: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Rotations R(scales[j] * omega) as an (n, 3, 3) stack."""
    omega = np.asarray(omega, dtype=np.float64)
    scales = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    n = float(np.linalg.norm(omega))
    if n < _SMALL_ANGLE:
        # Series in the full vector keeps exactness at omega == 0.
        K = cross_matrix(omega)
        K2 = K @ K
        out = np.eye(3)[None] + scales[:, None, None] * K[None]
        out += 0.5 * (scales**2)[:, None, None] * K2[None]
        return out
    return rotate_about_axis(omega / n, scales * n)


def rotation_vector_jacobian(theta_vec: np.ndarray, a: np.ndarray) -> np.ndarray:
    """d(R(theta) @ a) / d(theta) as a 3x3 matrix (columns: d/d theta_i).

    Closed form via the compact exponential-coordinates derivative; the
    zero-angle limit is -[a]_x.
    """
    theta_vec = np.asarray(theta_vec, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    n2 = float(theta_vec @ theta_vec)
    if n2 < _SMALL_ANGLE**2:
        return -cross_matrix(a)
    R = rodrigues(theta_vec)
    b = R @ a
    term1 = np.outer(np.cross(theta_vec, b), theta_vec)
    term2 = -cross_matrix(b) @ cross_matrix(theta_vec) @ (np.eye(3) - R)
    return (term1 + term2) / n2


def rotation_vector_jacobian_stack(
    omega: np.ndarray, scales: np.ndarray, points: np.ndarray
) -> np.ndarray:
    """Vectorized ``d(R(scales[j]*omega) @ points[j]) / d(omega)``.

    Shapes: scales (n,), points (n, 3) -> (n, 3, 3).  The chain factor
    ``scales[j]`` for d theta/d omega is already included.
    """
    omega = np.asarray(omega, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    out = np.empty((n, 3, 3))
    thetas = scales[:, None] * omega[None, :]
    n2 = np.einsum("ij,ij->i", thetas, thetas)
    small = n2 < _SMALL_ANGLE**2
    if np.any(small):
        # d(R(c w) a)/dw -> -c [a]_x as c*w -> 0
        out[small] = -scales[small, None, None] * _cross_matrix_stack(points[small])
    big = ~small
    if np.any(big):
        th = thetas[big]
        R = rotation_stack(omega, scales[big])
        b = np.einsum("nij,nj->ni", R, points[big])
        txb = np.cross(th, b)
        term1 = np.einsum("ni,nj->nij", txb, th)
        bx = _cross_matrix_stack(b)
        tx = _cross_matrix_stack(th)
        ImR = np.eye(3)[None] - R
        term2 = -np.einsum("nij,njk,nkl->nil", bx, tx, ImR)
        out[big] = (term1 + term2) / n2[big, None, None] * scales[big, None, None]
    return out


def _cross_matrix_stack(v: np.ndarray) -> np.ndarray:
    """(n, 3) -> (n, 3, 3) stack of skew-symmetric matrices."""
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


# ---------------------------------------------------------------------------
# Disparity <-> 3D (light-field focal-plane parameterization)
# ---------------------------------------------------------------------------


def disparity_to_point(u: float, v: float, d: float, intr) -> Point3:
    """3D point for a central-view pixel (u, v) with normalized disparity d.

    Z = beta * Pf / (d * Pf * w + beta); X = Z (u - u0) / f; Y likewise.
    Raises BehindCameraError when the denominator is non-positive.
    """
    denom = d * intr.Pf * intr.w + intr.beta
    if denom <= 0.0:
        raise BehindCameraError(
            f"disparity {d} maps behind the camera (denominator {denom} <= 0)",
            disparity=float(d),
        )
    z = intr.beta * intr.Pf / denom
    x = z * (u - intr.u0) / intr.f
    y = z * (v - intr.v0) / intr.f
    return Point3(x, y, z)


def point_to_disparity(p: Point3, intr) -> tuple[float, float, float]:
    """Inverse of :func:`disparity_to_point`: (u, v, d) for a 3D point."""
    if p.z <= 0.0:
        raise BehindCameraError(f"point with Z = {p.z} is behind the camera")
    u = intr.u0 + intr.f * p.x / p.z
    v = intr.v0 + intr.f * p.y / p.z
    d = intr.beta * (intr.Pf - p.z) / (p.z * intr.Pf * intr.w)
    return u, v, d


def project_points(points: np.ndarray, intr) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized point_to_disparity over an (n, 3) array; no Z validation.

    Callers are expected to mask non-positive Z themselves (the renderer
    culls such points instead of raising).
    """
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.u0 + intr.f * x / z
        v = intr.v0 + intr.f * y / z
        d = intr.beta * (intr.Pf - z) / (z * intr.Pf * intr.w)
    return u, v, d


def points_from_disparity(
    u: np.ndarray, v: np.ndarray, d: np.ndarray, intr
) -> np.ndarray:
    """Vectorized disparity_to_point over flat arrays -> (n, 3)."""
    denom = d * intr.Pf * intr.w + intr.beta
    if np.any(denom <= 0.0):
        bad = float(np.asarray(d).ravel()[np.argmax(denom <= 0.0)])
        raise BehindCameraError(
            f"disparity {bad} maps behind the camera", disparity=bad
        )
    z = intr.beta * intr.Pf / denom
    x = z * (u - intr.u0) / intr.f
    y = z * (v - intr.v0) / intr.f
    return np.stack([x, y, z], axis=-1)


# ---------------------------------------------------------------------------
# Constant-motion deformation (static shape and RS re-imaging)
# ---------------------------------------------------------------------------


def deform_to_static(p: Point3, tau: float, m: MotionParams) -> Point3:
    """Carry a point observed at time tau back to its tau = 0 position.

    Inverse of the forward motion map, i.e. R(-tau w) @ (P - tau v).  The
    translation is rotated along so that re-imaging at the same tau is an
    exact identity for any motion.
    """
    R = rodrigues(-tau * m.omega_array)
    ps = R @ (p.as_array() - tau * m.vel_array)
    return Point3.from_array(ps)


def reimage_at(ps: Point3, tau_lambda: float, m: MotionParams) -> Point3:
    """Forward motion map: position of a static point at time tau_lambda."""
    R = rodrigues(tau_lambda * m.omega_array)
    pl = R @ ps.as_array() + tau_lambda * m.vel_array
    return Point3.from_array(pl)


def deform_to_static_many(
    points: np.ndarray, taus: np.ndarray, m: MotionParams
) -> np.ndarray:
    """Vectorized deform_to_static over (n, 3) points with per-point taus."""
    R = rotation_stack(m.omega_array, -np.asarray(taus, dtype=np.float64))
    shifted = points - np.asarray(taus)[:, None] * m.vel_array[None, :]
    return np.einsum("nij,nj->ni", R, shifted)


def reimage_at_many(
    points_static: np.ndarray, tau_lambda: float, m: MotionParams
) -> np.ndarray:
    """Vectorized reimage_at over (n, 3) static points at one band time."""
    R = rodrigues(tau_lambda * m.omega_array)
    return points_static @ R.T + tau_lambda * m.vel_array[None, :]
