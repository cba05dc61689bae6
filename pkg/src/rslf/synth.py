"""Synthetic rolling-shutter light-field scenes with ground truth.

Scenes are textured rigid primitives (fronto-parallel planes, spheres)
under a constant 6-DoF motion.  The generator ray-casts every SAI row at
its own readout time: the scene is advanced by the forward motion map
``Q -> R(tau w) Q + tau v`` (rays are inverse-transformed into the static
frame, so hits are obtained directly in static coordinates).  This is the
per-row limit of the band-wise rolling-shutter model used by the
reconstruction, which makes the band size a genuine approximation under
test rather than a shared shortcut.

Per scene and motion the artifacts are: the RS-affected light field, a
global-shutter central view and depth map on a double-field-of-view
canvas, and a visibility mask on that canvas marking ground-truth pixels
whose surface point is actually observed in the RS central SAI.

Textures are procedural and hashed from integer lattice coordinates, so
they are deterministic for a given seed regardless of evaluation order
or worker count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .geometry import MotionParams, rotation_stack
from .io_formats import write_lightfield, write_mask_png, write_pfm, write_png16
from .lightfield import LFIntrinsics, LightField4D, RSTiming, row_time

_HIT_EPS = 1e-6
_DEPTH_MATCH_TOL = 0.02  # relative depth agreement for mask visibility
SCENE_DEPTH_RANGE = (1.2, 3.5)  # reference band for motion calibration


# ---------------------------------------------------------------------------
# Procedural textures
# ---------------------------------------------------------------------------


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Lattice hash -> floats in [0, 1); pure function of coordinates."""
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (
        iy.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
    ) ^ np.uint64(seed * 0x94D049BB133111EB & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(31)
    h *= np.uint64(0x2545F4914F6CDD1D)
    h ^= h >> np.uint64(29)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smooth(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _value_noise(px: np.ndarray, py: np.ndarray, scale: float, seed: int,
                 octaves: int) -> np.ndarray:
    out = np.zeros_like(px, dtype=np.float64)
    amp_total = 0.0
    amp = 1.0
    freq = 1.0 / scale
    for o in range(octaves):
        fx = px * freq
        fy = py * freq
        ix = np.floor(fx)
        iy = np.floor(fy)
        tx = _smooth(fx - ix)
        ty = _smooth(fy - iy)
        ix = ix.astype(np.int64)
        iy = iy.astype(np.int64)
        s = seed + 101 * o
        v00 = _hash01(ix, iy, s)
        v10 = _hash01(ix + 1, iy, s)
        v01 = _hash01(ix, iy + 1, s)
        v11 = _hash01(ix + 1, iy + 1, s)
        top = v00 + (v10 - v00) * tx
        bot = v01 + (v11 - v01) * tx
        out += amp * (top + (bot - top) * ty)
        amp_total += amp
        amp *= 0.55
        freq *= 2.0
    return out / amp_total


@dataclass(frozen=True)
class Texture:
    """Procedural surface intensity; kinds: checker | noise | image."""

    kind: str = "noise"
    scale: float = 0.15
    lo: float = 0.1
    hi: float = 0.9
    seed: int = 0
    octaves: int = 3
    path: str | None = None

    def sample(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        if self.kind == "checker":
            parity = (np.floor(px / self.scale) + np.floor(py / self.scale)) % 2
            return np.where(parity > 0.5, self.hi, self.lo)
        if self.kind == "noise":
            v = _value_noise(px, py, self.scale, self.seed, self.octaves)
            return self.lo + (self.hi - self.lo) * v
        if self.kind == "image":
            return self._sample_image(px, py)
        raise ArgumentError(f"unknown texture kind {self.kind!r}")

    def _sample_image(self, px, py):
        from .io_formats import read_png16

        img = read_png16(self.path)
        h, w = img.shape
        # wrap texture coordinates over the image, self.scale units per tile
        fx = np.mod(px / self.scale, 1.0) * (w - 1)
        fy = np.mod(py / self.scale, 1.0) * (h - 1)
        x0 = np.floor(fx).astype(np.int64)
        y0 = np.floor(fy).astype(np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        tx = fx - x0
        ty = fy - y0
        top = img[y0, x0] * (1 - tx) + img[y0, x1] * tx
        bot = img[y1, x0] * (1 - tx) + img[y1, x1] * tx
        return top * (1 - ty) + bot * ty

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "scale": self.scale, "lo": self.lo, "hi": self.hi,
             "seed": self.seed, "octaves": self.octaves}
        if self.path:
            d["path"] = self.path
        return d

    @staticmethod
    def from_dict(d: dict) -> "Texture":
        return Texture(**d)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    """Fronto-parallel textured rectangle at depth z (static pose)."""

    center: tuple[float, float, float]
    half_extent: tuple[float, float]
    texture: Texture

    def intersect(self, origin: np.ndarray, direction: np.ndarray):
        """Rays (..., 3) -> (s, intensity, hit_mask); s is the ray parameter."""
        oz = origin[..., 2]
        dz = direction[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.center[2] - oz) / dz
        q = origin + s[..., None] * direction
        px = q[..., 0] - self.center[0]
        py = q[..., 1] - self.center[1]
        hit = (
            np.isfinite(s)
            & (s > _HIT_EPS)
            & (np.abs(px) <= self.half_extent[0])
            & (np.abs(py) <= self.half_extent[1])
        )
        inten = np.where(hit, self.texture.sample(px, py), 0.0)
        return np.where(hit, s, np.inf), inten, hit

    def support_points(self) -> np.ndarray:
        cx, cy, cz = self.center
        hx, hy = self.half_extent
        return np.array(
            [[cx + sx * hx, cy + sy * hy, cz] for sx in (-1, 1) for sy in (-1, 1)]
        )

    def to_dict(self) -> dict:
        return {"type": "plane", "center": list(self.center),
                "half_extent": list(self.half_extent), "texture": self.texture.to_dict()}


@dataclass(frozen=True)
class Sphere:
    """Textured sphere; texture coordinates are arc lengths on the surface."""

    center: tuple[float, float, float]
    radius: float
    texture: Texture

    def intersect(self, origin: np.ndarray, direction: np.ndarray):
        c = np.asarray(self.center)
        oc = origin - c
        a = np.einsum("...i,...i->...", direction, direction)
        b = 2.0 * np.einsum("...i,...i->...", direction, oc)
        cc = np.einsum("...i,...i->...", oc, oc) - self.radius**2
        disc = b * b - 4.0 * a * cc
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s1 = (-b - sq) / (2.0 * a)
        s2 = (-b + sq) / (2.0 * a)
        s = np.where(s1 > _HIT_EPS, s1, s2)
        hit = ok & (s > _HIT_EPS)
        q = origin + s[..., None] * direction
        local = (q - c) / self.radius
        lz = np.clip(local[..., 2], -1.0, 1.0)
        theta = np.arccos(lz)
        phi = np.arctan2(local[..., 1], local[..., 0])
        inten = np.where(
            hit, self.texture.sample(phi * self.radius, theta * self.radius), 0.0
        )
        return np.where(hit, s, np.inf), inten, hit

    def support_points(self) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        r = self.radius
        offs = np.array(
            [[r, 0, 0], [-r, 0, 0], [0, r, 0], [0, -r, 0], [0, 0, r], [0, 0, -r]]
        )
        return c[None, :] + offs

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": list(self.center),
                "radius": self.radius, "texture": self.texture.to_dict()}


def primitive_from_dict(d: dict):
    if d["type"] == "plane":
        return Plane(tuple(d["center"]), tuple(d["half_extent"]),
                     Texture.from_dict(d["texture"]))
    if d["type"] == "sphere":
        return Sphere(tuple(d["center"]), d["radius"], Texture.from_dict(d["texture"]))
    raise ArgumentError(f"unknown primitive type {d['type']!r}")


# ---------------------------------------------------------------------------
# Scene specification and artifacts
# ---------------------------------------------------------------------------


@dataclass
class SceneSpec:
    primitives: list
    motion: MotionParams
    intr: LFIntrinsics
    num_views: int = 9
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if not self.primitives:
            raise ArgumentError("a scene needs at least one primitive")
        if self.num_views % 2 != 1:
            raise ArgumentError("view grid size must be odd")
        self.intr.validate_against(self.width)

    @property
    def timing(self) -> RSTiming:
        return RSTiming.for_frame(self.height, self.intr.v0)

    def validate_in_front(self) -> None:
        """Every primitive must stay in front of the camera over the readout."""
        pts = np.concatenate([p.support_points() for p in self.primitives])
        for tau in np.linspace(-0.6, 0.6, 7):
            R = rotation_stack(self.motion.omega_array, np.array([tau]))[0]
            moved_z = (pts @ R.T)[:, 2] + tau * self.motion.vel_array[2]
            if np.any(moved_z <= 0.05):
                raise ArgumentError(
                    f"primitive reaches the camera plane at tau = {tau:+.2f}"
                )

    def to_dict(self) -> dict:
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "motion": {"omega": list(self.motion.omega), "vel": list(self.motion.vel)},
            "intrinsics": self.intr.to_dict(),
            "num_views": self.num_views,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            primitives=[primitive_from_dict(p) for p in d["primitives"]],
            motion=MotionParams(tuple(d["motion"]["omega"]), tuple(d["motion"]["vel"])),
            intr=LFIntrinsics.from_dict(d["intrinsics"]),
            num_views=d["num_views"],
            width=d["width"],
            height=d["height"],
        )


@dataclass
class SceneArtifacts:
    lf: LightField4D
    gt_central: np.ndarray       # (2H, 2W) global-shutter intensity
    gt_depth: np.ndarray         # (2H, 2W) camera-Z depth, 0 where empty
    mask: np.ndarray             # (2H, 2W) bool: GT pixel seen in RS central SAI
    motion_gt: MotionParams
    spec: SceneSpec
    rs_central_depth: np.ndarray = field(default=None)  # (H, W) debug extra
    rs_central_hit: np.ndarray = field(default=None)    # (H, W) bool


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def _ray_grid(width, height, intr, cx, cy):
    """Sheared two-plane rays: origin (cx, cy, 0), Z = Pf pinned per view."""
    us = np.arange(width, dtype=np.float64)
    vs = np.arange(height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    dirx = (uu - intr.u0) / intr.f - cx / intr.Pf
    diry = (vv - intr.v0) / intr.f - cy / intr.Pf
    dirz = np.ones_like(dirx)
    return np.stack([dirx, diry, dirz], axis=-1)


def _cast_static(primitives, origins: np.ndarray, directions: np.ndarray):
    """Nearest-hit intersection of static-frame rays with all primitives.

    Returns (depth_param s, intensity, hit mask, static hit points).
    """
    best_s = np.full(directions.shape[:-1], np.inf)
    best_i = np.zeros(directions.shape[:-1])
    for prim in primitives:
        s, inten, hit = prim.intersect(origins, directions)
        closer = hit & (s < best_s)
        best_s = np.where(closer, s, best_s)
        best_i = np.where(closer, inten, best_i)
    hit = np.isfinite(best_s)
    qs = origins + np.where(hit, best_s, 0.0)[..., None] * directions
    return np.where(hit, best_s, 0.0), best_i, hit, qs


def _render_sai(spec: SceneSpec, x: int, y: int, rs: bool):
    """One SAI; returns (intensity, depth, hit, static hit points)."""
    intr = spec.intr
    x0 = y0 = (spec.num_views - 1) // 2
    bl = intr.view_baseline
    cx = (x - x0) * bl
    cy = (y - y0) * bl
    dirs = _ray_grid(spec.width, spec.height, intr, cx, cy)
    origin = np.array([cx, cy, 0.0])

    if rs:
        taus = np.asarray(row_time(np.arange(spec.height), spec.timing))
    else:
        taus = np.zeros(spec.height)
    # Inverse-transform rays into the static frame, one rotation per row.
    rots = rotation_stack(spec.motion.omega_array, taus)
    shifted = origin[None, :] - taus[:, None] * spec.motion.vel_array[None, :]
    o_static = np.einsum("hji,hj->hi", rots, shifted)  # R^T via transposed index
    d_static = np.einsum("hji,hwj->hwi", rots, dirs)
    origins = np.broadcast_to(o_static[:, None, :], dirs.shape)
    return _cast_static(spec.primitives, origins, d_static)


def render_rslf(spec: SceneSpec, workers: int | None = None) -> SceneArtifacts:
    """Render the RS light field and its ground-truth artifacts."""
    spec.validate_in_front()
    a = spec.num_views
    h, w = spec.height, spec.width
    data = np.empty((a, a, h, w))

    if workers is None:
        workers = int(os.environ.get("RSLF_THREADS", "1") or "1")
    views = [(x, y) for x in range(a) for y in range(a)]

    def run(view):
        x, y = view
        _, inten, _, _ = _render_sai(spec, x, y, rs=True)
        return x, y, inten

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for x, y, inten in pool.map(run, views):
                data[x, y] = inten
    else:
        for view in views:
            x, y, inten = run(view)
            data[x, y] = inten

    lf = LightField4D(np.clip(data, 0.0, 1.0), spec.intr, spec.timing)

    # Double-FOV ground truth from the central view at tau = 0.
    gt_intr = spec.intr.recentered(w / 2.0, h / 2.0)
    gt_dirs = _ray_grid(2 * w, 2 * h, gt_intr, 0.0, 0.0)
    gt_origin = np.broadcast_to(np.zeros(3), gt_dirs.shape)
    gt_depth, gt_central, gt_hit, _ = _cast_static(spec.primitives, gt_origin, gt_dirs)

    # RS central SAI hits, forward-mapped onto the GT canvas.
    x0 = y0 = (a - 1) // 2
    rs_depth, _, rs_hit, rs_points = _render_sai(spec, x0, y0, rs=True)
    mask = np.zeros((2 * h, 2 * w), dtype=bool)
    if np.any(rs_hit):
        q = rs_points[rs_hit]
        front = q[:, 2] > 0
        q = q[front]
        zq = q[:, 2]
        ug = np.rint(gt_intr.u0 + gt_intr.f * q[:, 0] / zq).astype(np.int64)
        vg = np.rint(gt_intr.v0 + gt_intr.f * q[:, 1] / zq).astype(np.int64)
        inside = (ug >= 0) & (ug < 2 * w) & (vg >= 0) & (vg < 2 * h)
        ug, vg, zq = ug[inside], vg[inside], zq[inside]
        zg = gt_depth[vg, ug]
        same_surface = np.abs(zg - zq) <= _DEPTH_MATCH_TOL * np.maximum(zg, 1e-9)
        mask[vg[same_surface], ug[same_surface]] = True
    mask &= gt_hit

    return SceneArtifacts(
        lf=lf,
        gt_central=np.clip(gt_central, 0.0, 1.0),
        gt_depth=gt_depth,
        mask=mask,
        motion_gt=spec.motion,
        spec=spec,
        rs_central_depth=rs_depth,
        rs_central_hit=rs_hit,
    )


def render_gs_sai(spec: SceneSpec, x: int, y: int) -> np.ndarray:
    """Global-shutter render of one SAI (scene frozen at tau = 0)."""
    _, inten, _, _ = _render_sai(spec, x, y, rs=False)
    return np.clip(inten, 0.0, 1.0)


def rs_central_disparity(artifacts: SceneArtifacts) -> tuple[np.ndarray, np.ndarray]:
    """Apparent normalized disparity of the RS central SAI (debug oracle)."""
    intr = artifacts.spec.intr
    z = artifacts.rs_central_depth
    with np.errstate(divide="ignore", invalid="ignore"):
        d = intr.beta * (intr.Pf - z) / (z * intr.Pf * intr.w)
    return np.where(artifacts.rs_central_hit, d, 0.0), artifacts.rs_central_hit


# ---------------------------------------------------------------------------
# Motion suite
# ---------------------------------------------------------------------------


def displacement_bound(
    m: MotionParams, intr: LFIntrinsics, width: int, height: int,
    depth_range: tuple[float, float] = SCENE_DEPTH_RANGE,
) -> float:
    """Max pixel displacement over the readout for scene points in the
    reference depth band; sampled on an image grid at the time extremes."""
    us = np.linspace(0.0, width - 1.0, 9)
    vs = np.linspace(0.0, height - 1.0, 9)
    zs = np.linspace(depth_range[0], depth_range[1], 4)
    uu, vv, zz = np.meshgrid(us, vs, zs)
    x = zz * (uu - intr.u0) / intr.f
    y = zz * (vv - intr.v0) / intr.f
    pts = np.stack([x.ravel(), y.ravel(), zz.ravel()], axis=1)
    worst = 0.0
    for tau in (-0.5, 0.5):
        R = rotation_stack(m.omega_array, np.array([tau]))[0]
        moved = pts @ R.T + tau * m.vel_array[None, :]
        good = moved[:, 2] > 0.1
        mu = intr.u0 + intr.f * moved[good, 0] / moved[good, 2]
        mv = intr.v0 + intr.f * moved[good, 1] / moved[good, 2]
        du = mu - uu.ravel()[good]
        dv = mv - vv.ravel()[good]
        worst = max(worst, float(np.max(np.hypot(du, dv))))
    return worst


_MOTION_TEMPLATES = [
    (np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])),   # lateral translation
    (np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])),   # dolly
    (np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 0.0])),   # roll
    (np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 0.0])),   # pan
    (np.array([0.45, 0.6, 0.35]), np.array([0.5, -0.35, 0.4])),  # mixed 6-DoF
]

SLOW_DISPLACEMENT_PX = 4.0
FAST_DISPLACEMENT_PX = 16.0


def motion_suite(intr: LFIntrinsics, width: int = 128, height: int = 128) -> list[MotionParams]:
    """Eleven motions: zero, five slow, five fast.

    Each template is scaled so its displacement bound hits the target
    (about 4 px for slow, 16 px for fast over one readout).
    """
    motions = [MotionParams()]
    for target in (SLOW_DISPLACEMENT_PX, FAST_DISPLACEMENT_PX):
        for omega_t, vel_t in _MOTION_TEMPLATES:
            scale = 0.1
            for _ in range(40):
                m = MotionParams(tuple(scale * omega_t), tuple(scale * vel_t))
                disp = displacement_bound(m, intr, width, height)
                if disp <= 0:
                    scale *= 2.0
                    continue
                ratio = target / disp
                if abs(ratio - 1.0) < 1e-6:
                    break
                scale *= min(max(ratio, 0.25), 4.0)
            motions.append(MotionParams(tuple(scale * omega_t), tuple(scale * vel_t)))
    return motions


def categorize_motion(m: MotionParams, intr: LFIntrinsics, width: int, height: int) -> str:
    """GS / slow / fast bucket from the displacement bound."""
    disp = displacement_bound(m, intr, width, height)
    if disp < 1.0:
        return "GS"
    if disp < 0.5 * (SLOW_DISPLACEMENT_PX + FAST_DISPLACEMENT_PX):
        return "slow"
    return "fast"


# ---------------------------------------------------------------------------
# Presets and dataset emission
# ---------------------------------------------------------------------------


def default_intrinsics(width: int, height: int) -> LFIntrinsics:
    """Desk-scale camera: 4 mm sensor and lens, baseline 0.03 units."""
    f = float(width)  # F * W / w with F = w = 4 mm
    return LFIntrinsics(f=f, u0=width / 2.0, v0=height / 2.0,
                        w=4.0, F=4.0, b=0.03, Pf=2.0)


def scene_preset(
    name: str,
    motion: MotionParams,
    size: int = 128,
    num_views: int = 9,
    seed: int = 0,
) -> SceneSpec:
    """Built-in scenes.  Foregrounds sit close to the camera: the motion
    signal scales with disparity times row period, so large parallax is
    what makes desk-scale velocity estimation well conditioned."""
    intr = default_intrinsics(size, size)
    bg = Plane((0.0, 0.0, 2.8), (6.0, 6.0), Texture("noise", scale=0.3, seed=seed + 7))
    if name == "plane":
        prims = [Plane((0.0, 0.0, 2.0), (2.8, 2.8), Texture("noise", scale=0.2, seed=seed))]
    elif name == "checker":
        prims = [
            Plane((0.0, 0.0, 1.35), (0.8, 0.8), Texture("checker", scale=0.18, lo=0.15, hi=0.85)),
            bg,
        ]
    elif name == "sphere":
        prims = [
            Sphere((0.1, -0.06, 1.5), 0.32, Texture("noise", scale=0.1, seed=seed + 1)),
            bg,
        ]
    elif name == "mixed":
        prims = [
            Sphere((-0.32, 0.2, 1.55), 0.33, Texture("noise", scale=0.1, seed=seed + 2)),
            Plane((0.42, -0.22, 1.35), (0.42, 0.3), Texture("checker", scale=0.13, lo=0.2, hi=0.9)),
            bg,
        ]
    else:
        raise ArgumentError(f"unknown scene preset {name!r}")
    return SceneSpec(primitives=prims, motion=motion, intr=intr,
                     num_views=num_views, width=size, height=size)


def write_scene_artifacts(artifacts: SceneArtifacts, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_lightfield(artifacts.lf, out, motion_gt=artifacts.motion_gt)
    write_png16(out / "gt_central.png", artifacts.gt_central)
    write_pfm(out / "gt_depth.pfm", artifacts.gt_depth)
    write_mask_png(out / "mask.png", artifacts.mask)
    (out / "scene.json").write_text(json.dumps(artifacts.spec.to_dict(), sort_keys=True))


def read_scene_spec(dataset_dir) -> SceneSpec:
    return SceneSpec.from_dict(json.loads((Path(dataset_dir) / "scene.json").read_text()))
