"""Byte-level readers and writers for every on-disk artifact.

Formats:

* PFM (grayscale ``Pf``): float32 maps, bottom-up raster; we write
  little-endian with scale -1.0 and read either endianness.
* PNG via Pillow: 16-bit grayscale for intensity images (quantization
  error <= 1/65535), 8-bit for masks (255 = visible) and RGB.
* Light-field container: a directory with ``meta.json`` plus A*A files
  ``sai_{x:02d}_{y:02d}.png``; meta carries intrinsics, timing, optional
  ground-truth motion and sha256 content hashes, all verified on load.
* Gaussian cloud: ``cloud.bin`` with magic ``RSLF``, little-endian header
  (version u32, N u64, background f32) and N records of 5 f32
  (X, Y, Z, sigma, intensity), mirrored to ``cloud.json`` for debugging.

Every writer/reader pair round-trips bit-exactly on its value domain.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ArgumentError, CorruptionError, DataError, ParseError, VersionError
from .geometry import MotionParams
from .lightfield import LFIntrinsics, LightField4D, RSTiming

CONTAINER_SCHEMA_VERSION = 1
CLOUD_MAGIC = b"RSLF"
CLOUD_VERSION = 1


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray, scale: float = -1.0) -> None:
    """Write a 2D float map as grayscale PFM (bottom-up raster)."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ArgumentError(f"PFM writer expects a 2D map, got shape {data.shape}")
    if scale >= 0:
        raise ArgumentError("only little-endian output (scale < 0) is supported")
    arr = data.astype("<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(f"{scale:.1f}\n".encode("ascii"))
        fh.write(arr[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a float32 array (top-down in memory)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read PFM file {path}: {exc}") from exc

    def next_token(buf, pos):
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"truncated PFM header in {path}")
        return buf[start:pos], pos

    magic, pos = next_token(raw, 0)
    if magic != b"Pf":
        raise ParseError(f"{path}: not a grayscale PFM (magic {magic!r})")
    try:
        wtok, pos = next_token(raw, pos)
        htok, pos = next_token(raw, pos)
        stok, pos = next_token(raw, pos)
        w, h, scale = int(wtok), int(htok), float(stok)
    except (ValueError, ParseError) as exc:
        raise ParseError(f"{path}: malformed PFM header") from exc
    if w <= 0 or h <= 0 or w * h > 1 << 28:
        raise ParseError(f"{path}: implausible PFM dimensions {w} x {h}")
    pos += 1  # single whitespace byte after the scale line
    expected = w * h * 4
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise ParseError(
            f"{path}: PFM payload truncated ({len(payload)} of {expected} bytes)"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return arr[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# PNG helpers
# ---------------------------------------------------------------------------


def write_png16(path, data: np.ndarray) -> None:
    """Store a [0, 1] float image as 16-bit grayscale PNG."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ArgumentError(f"expected 2D image, got shape {data.shape}")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ArgumentError("intensities must lie in [0, 1] before quantization")
    q = np.round(data * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_png16(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG back to floats in [0, 1]."""
    try:
        img = Image.open(path)
        arr = np.asarray(img)
    except (OSError, SyntaxError) as exc:
        raise ParseError(f"cannot decode PNG {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr.astype(np.float64).mean(axis=2)
        return arr / 255.0
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0


def write_png8_rgb(path, data: np.ndarray) -> None:
    """Store a [0, 1] float HxWx3 image as 8-bit RGB PNG."""
    q = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def write_mask_png(path, mask: np.ndarray) -> None:
    """Boolean mask to 8-bit PNG, 255 = visible."""
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def read_mask_png(path) -> np.ndarray:
    try:
        arr = np.asarray(Image.open(path))
    except (OSError, SyntaxError) as exc:
        raise ParseError(f"cannot decode mask PNG {path}: {exc}") from exc
    return arr >= 128


# ---------------------------------------------------------------------------
# Light-field container
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _sai_name(x: int, y: int) -> str:
    return f"sai_{x:02d}_{y:02d}.png"


def write_lightfield(
    lf: LightField4D,
    out_dir,
    motion_gt: MotionParams | None = None,
    extra_meta: dict | None = None,
) -> dict:
    """Write the SAI grid + meta.json; returns the manifest dict.

    Intensities are quantized to 16 bits, so a write -> read round trip is
    bit-exact once the tensor is itself 16-bit quantized.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a = lf.num_views
    hashes = {}
    for x in range(a):
        for y in range(a):
            name = _sai_name(x, y)
            write_png16(out / name, lf.sai_view(x, y))
            hashes[name] = _sha256(out / name)
    meta = {
        "schema_version": CONTAINER_SCHEMA_VERSION,
        "A": a,
        "W": lf.width,
        "H": lf.height,
        "channels": lf.channels,
        "intrinsics": lf.intrinsics.to_dict(),
        "row_period": lf.timing.row_period,
        "readout_direction": lf.timing.readout_direction,
        "hashes": hashes,
    }
    if motion_gt is not None:
        meta["motion_gt"] = {
            "omega": list(map(float, motion_gt.omega)),
            "vel": list(map(float, motion_gt.vel)),
        }
    if extra_meta:
        meta.update(extra_meta)
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return meta


def read_container_meta(dataset_dir) -> dict:
    meta_path = Path(dataset_dir) / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"missing container manifest: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in {meta_path}: {exc}") from exc
    version = meta.get("schema_version")
    if version != CONTAINER_SCHEMA_VERSION:
        raise VersionError(
            f"{meta_path}: schema version {version} unsupported "
            f"(expected {CONTAINER_SCHEMA_VERSION})"
        )
    return meta


def read_lightfield(dataset_dir, verify_hashes: bool = True) -> LightField4D:
    """Load a container directory back into a LightField4D.

    RGB SAIs are averaged to grayscale; ``channels`` records the source.
    Content hashes from meta.json are verified unless disabled.
    """
    root = Path(dataset_dir)
    meta = read_container_meta(root)
    a, h, w = int(meta["A"]), int(meta["H"]), int(meta["W"])
    if not (1 <= a <= 99 and a % 2 == 1) or not (1 <= h <= 1 << 14) or not (1 <= w <= 1 << 14):
        raise ParseError(f"{root}: implausible container dimensions A={a} H={h} W={w}")
    hashes = meta.get("hashes", {})
    data = np.empty((a, a, h, w), dtype=np.float64)
    for x in range(a):
        for y in range(a):
            name = _sai_name(x, y)
            path = root / name
            if not path.is_file():
                raise DataError(f"missing SAI file: {path}")
            if verify_hashes and name in hashes and _sha256(path) != hashes[name]:
                raise CorruptionError(f"content hash mismatch for {path}")
            img = read_png16(path)
            if img.shape != (h, w):
                raise ParseError(f"{path}: expected {h}x{w}, found {img.shape}")
            data[x, y] = img
    intr = LFIntrinsics.from_dict(meta["intrinsics"])
    timing = RSTiming(row_period=float(meta["row_period"]), v0=intr.v0)
    return LightField4D(data, intr, timing, channels=int(meta.get("channels", 1)))


def read_motion_gt(dataset_dir) -> MotionParams | None:
    meta = read_container_meta(dataset_dir)
    m = meta.get("motion_gt")
    if m is None:
        return None
    return MotionParams(omega=tuple(m["omega"]), vel=tuple(m["vel"]))


def dataset_fingerprint(dataset_dir) -> str:
    """Stable hash of a dataset: sha256 over the sorted content hashes."""
    meta = read_container_meta(dataset_dir)
    h = hashlib.sha256()
    for name in sorted(meta.get("hashes", {})):
        h.update(name.encode())
        h.update(meta["hashes"][name].encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Gaussian cloud
# ---------------------------------------------------------------------------


def write_cloud(path, positions: np.ndarray, sigmas: np.ndarray,
                intensities: np.ndarray, background: float,
                json_mirror: bool = True) -> None:
    """Serialize a cloud to cloud.bin (+ cloud.json next to it)."""
    path = Path(path)
    n = positions.shape[0]
    records = np.empty((n, 5), dtype="<f4")
    records[:, 0:3] = positions
    records[:, 3] = sigmas
    records[:, 4] = intensities
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<IQf", CLOUD_VERSION, n, background))
        fh.write(records.tobytes())
    if json_mirror:
        mirror = {
            "version": CLOUD_VERSION,
            "count": int(n),
            "background": float(background),
            "gaussians": [
                {
                    "center": [float(v) for v in records[i, 0:3]],
                    "sigma": float(records[i, 3]),
                    "intensity": float(records[i, 4]),
                }
                for i in range(n)
            ],
        }
        path.with_suffix(".json").write_text(json.dumps(mirror))


def read_cloud(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Read cloud.bin -> (positions (N,3), sigmas (N,), intensities (N,), background)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read cloud file {path}: {exc}") from exc
    header = 4 + struct.calcsize("<IQf")
    if len(raw) < header:
        raise ParseError(f"{path}: truncated cloud header")
    if raw[:4] != CLOUD_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}")
    version, n, background = struct.unpack_from("<IQf", raw, 4)
    if version != CLOUD_VERSION:
        raise VersionError(f"{path}: cloud version {version} unsupported")
    expected = header + n * 5 * 4
    if n > 1 << 32 or len(raw) != expected:
        raise ParseError(
            f"{path}: size mismatch (N = {n}, {len(raw)} bytes, expected {expected})"
        )
    records = np.frombuffer(raw[header:], dtype="<f4").reshape(n, 5)
    return (
        records[:, 0:3].astype(np.float64),
        records[:, 3].astype(np.float64),
        records[:, 4].astype(np.float64),
        float(background),
    )
