"""4D light-field container, intrinsics, and rolling-shutter row timing.

A light field is an A x A grid of sub-aperture images (SAIs).  The data
tensor is indexed ``data[x, y, v, u]``: view column x, view row y, pixel
row v, pixel column u, so ``data[x, y]`` is one H x W SAI.  A is odd, so a
central view (x0, y0) = ((A-1)/2, (A-1)/2) always exists.

Row timing is shared by all SAIs (they are read out in lockstep), with
time zero at the readout of the principal row v0 and one full-frame
readout spanning one time unit by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, BoundsError


@dataclass(frozen=True)
class LFIntrinsics:
    """Camera model shared by all SAIs.

    f      focal length in pixels (= F / pixel size, pixel size = w / W)
    u0, v0 principal point in pixels
    w      sensor width in mm
    F      focal length in mm
    b      baseline between adjacent SAIs in mm
    Pf     distance of the light-field focal plane, scene units
    beta   b * F * max(2 u0, 2 v0); fixes the normalized-disparity scale

    The constants are arranged so that one unit of disparity equals one
    pixel of parallax per view step (see ``view_baseline``).
    """

    f: float
    u0: float
    v0: float
    w: float
    F: float
    b: float
    Pf: float
    beta: float = field(default=0.0)

    def __post_init__(self):
        if self.beta == 0.0:
            object.__setattr__(self, "beta", self.b * self.F * max(2 * self.u0, 2 * self.v0))
        for name in ("f", "w", "F", "b", "Pf", "beta"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ArgumentError(f"intrinsics field {name} must be strictly positive, got {val}")

    def validate_against(self, width: int) -> None:
        """Check f = F / (w / width) to 1e-6 relative."""
        if abs(self.f * self.w - self.F * width) > 1e-6 * abs(self.F * width):
            raise ArgumentError(
                f"inconsistent intrinsics: f*w = {self.f * self.w} but F*W = {self.F * width}"
            )

    @property
    def view_baseline(self) -> float:
        """Scene-unit spacing of adjacent view centers: beta / (f * w).

        With this spacing a point of disparity d shifts by exactly d
        pixels between adjacent views, which is what pins d's unit.
        """
        return self.beta / (self.f * self.w)

    def recentered(self, du: float, dv: float) -> "LFIntrinsics":
        """Same camera with the principal point moved by (du, dv) pixels.

        beta is carried over unchanged; it is a property of the capture,
        not of the render canvas.
        """
        return LFIntrinsics(
            f=self.f, u0=self.u0 + du, v0=self.v0 + dv,
            w=self.w, F=self.F, b=self.b, Pf=self.Pf, beta=self.beta,
        )

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("f", "u0", "v0", "w", "F", "b", "Pf")}

    @staticmethod
    def from_dict(d: dict) -> "LFIntrinsics":
        return LFIntrinsics(
            f=float(d["f"]), u0=float(d["u0"]), v0=float(d["v0"]),
            w=float(d["w"]), F=float(d["F"]), b=float(d["b"]), Pf=float(d["Pf"]),
        )


@dataclass(frozen=True)
class RSTiming:
    """Affine row-readout clock, identical for every SAI.

    ``row_period`` is the time to read one pixel row in normalized units
    (one full-frame readout = 1.0 by convention, so row_period = 1/H).
    Readout runs top to bottom; time zero is the readout of row v0.
    """

    row_period: float
    v0: float
    readout_direction: str = "top-to-bottom"

    def __post_init__(self):
        if not (np.isfinite(self.row_period) and self.row_period > 0):
            raise ArgumentError(f"row_period must be positive, got {self.row_period}")
        if self.readout_direction != "top-to-bottom":
            raise ArgumentError(f"unsupported readout direction {self.readout_direction!r}")

    @staticmethod
    def for_frame(height: int, v0: float) -> "RSTiming":
        return RSTiming(row_period=1.0 / height, v0=v0)


def row_time(v, timing: RSTiming):
    """Observation time of pixel row v: (v - v0) * row_period.

    Accepts scalars or arrays; v need not be an integer (a Gaussian's
    continuous projection row has a well-defined time).
    """
    return (np.asarray(v, dtype=np.float64) - timing.v0) * timing.row_period


class LightField4D:
    """Immutable 4D intensity tensor plus intrinsics and timing."""

    def __init__(self, data: np.ndarray, intrinsics: LFIntrinsics, timing: RSTiming,
                 channels: int = 1):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 4 or data.shape[0] != data.shape[1]:
            raise ArgumentError(f"light field must be (A, A, H, W), got {data.shape}")
        if data.shape[0] % 2 != 1:
            raise ArgumentError(f"view grid size A = {data.shape[0]} must be odd")
        if not np.all(np.isfinite(data)):
            raise ArgumentError("light field contains non-finite intensities")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ArgumentError("light field intensities must lie in [0, 1]")
        if channels not in (1, 3):
            raise ArgumentError(f"channels must be 1 or 3, got {channels}")
        intrinsics.validate_against(data.shape[3])
        data.setflags(write=False)
        self.data = data
        self.intrinsics = intrinsics
        self.timing = timing
        self.channels = channels

    @property
    def num_views(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def center_index(self) -> tuple[int, int]:
        c = (self.num_views - 1) // 2
        return c, c

    def sai_view(self, x: int, y: int) -> np.ndarray:
        """The H x W sub-aperture image at view (x, y); a read-only view."""
        a = self.num_views
        if not 0 <= x < a:
            raise BoundsError(f"view index x = {x} out of range [0, {a}) on the view-column axis")
        if not 0 <= y < a:
            raise BoundsError(f"view index y = {y} out of range [0, {a}) on the view-row axis")
        return self.data[x, y]


def sai_view(lf: LightField4D, x: int, y: int) -> np.ndarray:
    """Module-level alias of :meth:`LightField4D.sai_view` (dispatches
    through the instance so instrumented subclasses keep working)."""
    return lf.sai_view(x, y)


def central_row_views(lf: LightField4D, count: int) -> list[tuple[int, int]]:
    """``count`` views on the central view row, symmetric and maximally
    spread about the center (for A = 9, count = 5: x in {0, 2, 4, 6, 8})."""
    a = lf.num_views
    if count % 2 != 1:
        raise ArgumentError(f"count must be odd, got {count}")
    if not 1 <= count <= a:
        raise ArgumentError(f"count = {count} must be in [1, A = {a}]")
    x0, y0 = lf.center_index
    if count == 1:
        return [(x0, y0)]
    half = (count - 1) // 2
    step = (a - 1) / (count - 1)
    xs = [int(np.floor(i * step + 0.5)) for i in range(half)]
    xs = xs + [x0] + [a - 1 - x for x in reversed(xs)]
    return [(x, y0) for x in xs]


def corner_views(lf: LightField4D) -> list[tuple[int, int]]:
    """The four extreme corners of the view grid."""
    a = lf.num_views
    if a < 3:
        raise ArgumentError(f"corner views require A >= 3, got A = {a}")
    return [(0, 0), (a - 1, 0), (0, a - 1), (a - 1, a - 1)]


def band_ranges(height: int, band_height: int) -> list[tuple[int, int]]:
    """Partition rows 0..H into [v_a, v_b) bands; the last may be partial."""
    if band_height < 1:
        raise ArgumentError(f"band height must be >= 1, got {band_height}")
    return [(v, min(v + band_height, height)) for v in range(0, height, band_height)]


def band_time(va: int, vb: int, timing: RSTiming) -> float:
    """Representative time of a band: row_time at its center row."""
    if not va < vb:
        raise ArgumentError(f"empty band [{va}, {vb})")
    return float(row_time(0.5 * (va + vb - 1), timing))
