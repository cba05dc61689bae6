"""Independent oracles used across the test suite.

These deliberately avoid the library's fast paths: the compositor walks
pixels one by one, the gradient checker uses central differences on the
scalar loss, and the Adam reference is a direct transcription of the
update rule.
"""

from __future__ import annotations

import numpy as np

from rslf.geometry import MotionParams
from rslf.lightfield import band_time, row_time
from rslf.splat import (
    ALPHA_CAP,
    SUPPORT_SIGMAS,
    GaussianCloud,
    LFGeometry,
    render_band,
)


def oracle_alpha(dist_sq: float, sigma: float) -> float:
    """Same alpha model as the renderer, written independently."""
    support_sq = (SUPPORT_SIGMAS * sigma) ** 2
    if dist_sq >= support_sq:
        return 0.0
    t = dist_sq / support_sq
    taper = (1.0 - t) ** 2 * (1.0 + 2.0 * t)
    return ALPHA_CAP * np.exp(-dist_sq / (2.0 * sigma**2)) * taper


def oracle_render_band(cloud: GaussianCloud, geom: LFGeometry, x, y, band,
                       motion: MotionParams | None = None):
    """Per-pixel brute force: every Gaussian, no culling, explicit sort.

    Returns (intensity, disparity, alpha_acc) arrays for the band.
    """
    va, vb = band
    width = geom.width
    x0, y0 = geom.center_index
    dx, dy = x0 - x, y0 - y

    points = cloud.positions.astype(np.float64)
    if motion is not None:
        from rslf.geometry import deform_to_static, reimage_at, Point3, point_to_disparity

        tau_l = band_time(va, vb, geom.timing)
        moved = np.empty_like(points)
        for j in range(points.shape[0]):
            p = Point3.from_array(points[j])
            _, vj, _ = point_to_disparity(p, geom.intr)
            tau_j = float(row_time(vj, geom.timing))
            ps = deform_to_static(p, tau_j, motion)
            moved[j] = reimage_at(ps, tau_l, motion).as_array()
        points = moved

    zs = points[:, 2]
    us = geom.intr.u0 + geom.intr.f * points[:, 0] / zs
    vs = geom.intr.v0 + geom.intr.f * points[:, 1] / zs
    ds = geom.intr.beta * (geom.intr.Pf - zs) / (zs * geom.intr.Pf * geom.intr.w)
    mu_u = us + ds * dx
    mu_v = vs + ds * dy

    n = points.shape[0]
    order = sorted(range(n), key=lambda j: (-ds[j], j))

    h = vb - va
    intensity = np.zeros((h, width))
    disparity = np.zeros((h, width))
    alpha_acc = np.zeros((h, width))
    for row in range(va, vb):
        for col in range(width):
            transmit = 1.0
            c = 0.0
            dsum = 0.0
            asum = 0.0
            for j in order:
                if zs[j] <= 0:
                    continue
                dist_sq = (col - mu_u[j]) ** 2 + (row - mu_v[j]) ** 2
                a = oracle_alpha(dist_sq, cloud.sigmas[j])
                if a == 0.0:
                    continue
                c += cloud.intensities[j] * a * transmit
                dsum += ds[j] * a * transmit
                asum += a * transmit
                transmit *= 1.0 - a
            c += cloud.background * transmit
            intensity[row - va, col] = c
            disparity[row - va, col] = dsum
            alpha_acc[row - va, col] = asum
    return intensity, disparity, alpha_acc


def fd_loss_gradients(cloud: GaussianCloud, geom: LFGeometry, x, y, band,
                      residual: np.ndarray, motion: MotionParams | None,
                      h: float = 1e-4):
    """Central finite differences of L = sum(residual * rendered intensity).

    Returns the same gradient classes as backward_band.  Per-Gaussian
    observation times are frozen at their base-point values, matching the
    renderer's gradient model (tau is a per-iteration constant).
    """
    from rslf.splat import gaussian_taus

    taus0 = gaussian_taus(cloud, geom.intr, geom.timing) if motion is not None else None

    def loss(c: GaussianCloud, m: MotionParams | None) -> float:
        out = render_band(c, geom, x, y, band, motion=m, taus=taus0)
        return float(np.sum(residual * out.intensity))

    n = len(cloud)
    g_pos = np.zeros((n, 3))
    g_sig = np.zeros(n)
    g_int = np.zeros(n)
    for j in range(n):
        for k in range(3):
            c = cloud.copy(); c.positions[j, k] += h
            lp = loss(c, motion)
            c = cloud.copy(); c.positions[j, k] -= h
            lm = loss(c, motion)
            g_pos[j, k] = (lp - lm) / (2 * h)
        c = cloud.copy(); c.sigmas[j] += h
        lp = loss(c, motion)
        c = cloud.copy(); c.sigmas[j] -= h
        lm = loss(c, motion)
        g_sig[j] = (lp - lm) / (2 * h)
        c = cloud.copy(); c.intensities[j] += h
        lp = loss(c, motion)
        c = cloud.copy(); c.intensities[j] -= h
        lm = loss(c, motion)
        g_int[j] = (lp - lm) / (2 * h)

    g_omega = np.zeros(3)
    g_vel = np.zeros(3)
    if motion is not None:
        w0 = np.array(motion.omega, dtype=float)
        v0 = np.array(motion.vel, dtype=float)
        for k in range(3):
            wp = w0.copy(); wp[k] += h
            wm = w0.copy(); wm[k] -= h
            g_omega[k] = (
                loss(cloud, MotionParams(tuple(wp), tuple(v0)))
                - loss(cloud, MotionParams(tuple(wm), tuple(v0)))
            ) / (2 * h)
            vp = v0.copy(); vp[k] += h
            vm = v0.copy(); vm[k] -= h
            g_vel[k] = (
                loss(cloud, MotionParams(tuple(w0), tuple(vp)))
                - loss(cloud, MotionParams(tuple(w0), tuple(vm)))
            ) / (2 * h)
    return g_pos, g_sig, g_int, g_omega, g_vel


def reference_adam(params, grads_sequence, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Ten-line textbook Adam, applied to a whole gradient sequence."""
    p = np.array(params, dtype=float)
    m = np.zeros_like(p)
    u = np.zeros_like(p)
    for t, g in enumerate(grads_sequence, start=1):
        m = beta1 * m + (1 - beta1) * g
        u = beta2 * u + (1 - beta2) * g * g
        mh = m / (1 - beta1**t)
        uh = u / (1 - beta2**t)
        p = p - lr * mh / (np.sqrt(uh) + eps)
    return p


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Class-level relative error: max |diff| over the class scale."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)
