"""Masked evaluation of reconstructions against synthetic ground truth.

Depth metrics (abs diff, rmse, delta < 1.25) and intensity rmse are
computed over the visibility mask intersected with the prediction's own
validity, on the shared double-FOV canvas.  The delta metric uses the
"relative difference below 0.25" reading: |pred - gt| / gt < 0.25.

``evaluate_run`` consumes a pipeline run directory plus its dataset;
``write_report`` aggregates several runs into a table (rows = runs,
column groups = metric x motion category).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError
from .io_formats import (
    read_container_meta,
    read_mask_png,
    read_motion_gt,
    read_pfm,
    read_png16,
)
from .lightfield import LFIntrinsics
from .synth import categorize_motion

DELTA_THRESHOLD = 0.25


def _masked(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ArgumentError(
            f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}"
        )
    if not mask.any():
        raise ArgumentError("empty evaluation mask")
    return pred[mask], gt[mask]


def abs_diff(pred, gt, mask) -> float:
    """Mean absolute difference over masked pixels."""
    p, g = _masked(pred, gt, mask)
    return float(np.mean(np.abs(p - g)))


def rmse(pred, gt, mask) -> float:
    """Root mean squared error over masked pixels."""
    p, g = _masked(pred, gt, mask)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def delta_125(pred, gt, mask) -> float:
    """Fraction of masked pixels with relative depth error below 0.25.

    Non-positive ground-truth pixels are excluded (and counted by the
    caller via ``count_nonpositive_gt``).
    """
    p, g = _masked(pred, gt, mask)
    ok = g > 0
    if not ok.any():
        raise ArgumentError("no positive-ground-truth pixels under the mask")
    rel = np.abs(p[ok] - g[ok]) / g[ok]
    return float(np.mean(rel < DELTA_THRESHOLD))


def count_nonpositive_gt(gt, mask) -> int:
    g = np.asarray(gt)[np.asarray(mask, dtype=bool)]
    return int(np.sum(g <= 0))


@dataclass
class MetricReport:
    abs_diff: float
    rmse: float
    delta_125: float
    rmse_intensity: float
    pixel_count: int
    excluded_nonpositive_gt: int
    category: str
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "category": self.category,
            "abs_diff": self.abs_diff,
            "rmse": self.rmse,
            "delta_125": self.delta_125,
            "rmse_intensity": self.rmse_intensity,
            "pixel_count": self.pixel_count,
            "excluded_nonpositive_gt": self.excluded_nonpositive_gt,
        }


def _align_to_prediction(gt: np.ndarray, pred_shape, nearest: bool) -> np.ndarray:
    """Map the double-FOV GT onto the prediction canvas.

    Same canvas: identity.  Half-size prediction (original FOV): center
    crop.  Depth uses nearest-neighbor semantics; intensity would use
    bilinear, but the supported canvases are pixel-aligned so both reduce
    to exact gathers.
    """
    gh, gw = gt.shape
    ph, pw = pred_shape
    if (gh, gw) == (ph, pw):
        return gt
    if (gh, gw) == (2 * ph, 2 * pw):
        return gt[ph // 2 : ph // 2 + ph, pw // 2 : pw // 2 + pw]
    raise ArgumentError(
        f"cannot align ground truth {gt.shape} to prediction {pred_shape}"
    )


def evaluate_prediction(
    pred_depth: np.ndarray,
    pred_intensity: np.ndarray,
    pred_valid: np.ndarray,
    gt_depth: np.ndarray,
    gt_intensity: np.ndarray,
    gt_mask: np.ndarray,
    category: str = "",
    label: str = "",
) -> MetricReport:
    gt_d = _align_to_prediction(gt_depth, pred_depth.shape, nearest=True)
    gt_i = _align_to_prediction(gt_intensity, pred_depth.shape, nearest=False)
    mask = _align_to_prediction(gt_mask.astype(np.float64), pred_depth.shape, True) > 0.5
    joint = mask & np.asarray(pred_valid, dtype=bool)
    if not joint.any():
        raise ArgumentError("mask and prediction validity do not overlap")
    effective = joint & (gt_d > 0)
    return MetricReport(
        abs_diff=abs_diff(pred_depth, gt_d, effective),
        rmse=rmse(pred_depth, gt_d, effective),
        delta_125=delta_125(pred_depth, gt_d, effective),
        rmse_intensity=rmse(pred_intensity, gt_i, joint),
        pixel_count=int(effective.sum()),
        excluded_nonpositive_gt=count_nonpositive_gt(gt_d, joint),
        category=category,
        label=label,
    )


def _require(path: Path) -> Path:
    if not path.is_file():
        raise DataError(f"missing evaluation artifact: {path}")
    return path


def evaluate_run(run_dir, dataset_dir, label: str | None = None) -> MetricReport:
    """Score one pipeline run directory against its dataset."""
    run = Path(run_dir)
    ds = Path(dataset_dir)
    pred_depth = read_pfm(_require(run / "pred_depth.pfm"))
    pred_intensity = read_png16(_require(run / "pred_intensity.png"))
    pred_valid = read_mask_png(_require(run / "pred_valid.png"))
    gt_depth = read_pfm(_require(ds / "gt_depth.pfm"))
    gt_intensity = read_png16(_require(ds / "gt_central.png"))
    gt_mask = read_mask_png(_require(ds / "mask.png"))

    meta = read_container_meta(ds)
    intr = LFIntrinsics.from_dict(meta["intrinsics"])
    motion = read_motion_gt(ds)
    category = "GS"
    if motion is not None:
        category = categorize_motion(motion, intr, int(meta["W"]), int(meta["H"]))
    if label is None:
        try:
            label = json.loads((run / "run.json").read_text()).get("ablation", run.name)
        except (OSError, json.JSONDecodeError):
            label = run.name
    return evaluate_prediction(
        pred_depth.astype(np.float64), pred_intensity, pred_valid,
        gt_depth.astype(np.float64), gt_intensity, gt_mask,
        category=category, label=label,
    )


# ---------------------------------------------------------------------------
# Report aggregation
# ---------------------------------------------------------------------------

_METRICS = ("abs_diff", "rmse", "delta_125", "rmse_intensity")
_CATEGORIES = ("GS", "slow", "fast")


def aggregate_reports(reports: list[MetricReport]) -> dict:
    """Mean per (label, category) cell over per-scene reports."""
    table: dict = {}
    for rep in reports:
        row = table.setdefault(rep.label, {})
        cell = row.setdefault(rep.category, [])
        cell.append(rep)
    out = {}
    for label, cats in table.items():
        out[label] = {}
        for cat, reps in cats.items():
            out[label][cat] = {
                m: float(np.mean([getattr(r, m) for r in reps])) for m in _METRICS
            }
            out[label][cat]["scenes"] = len(reps)
    return out


def write_report(reports: list[MetricReport], out_dir) -> None:
    """Emit report.json and a human-readable report.md table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agg = aggregate_reports(reports)
    (out / "report.json").write_text(json.dumps({
        "rows": agg,
        "per_scene": [r.to_dict() for r in reports],
    }, indent=1, sort_keys=True))

    lines = []
    header = "| method |"
    rule = "| --- |"
    for m in _METRICS:
        for c in _CATEGORIES:
            header += f" {m}/{c} |"
            rule += " --- |"
    lines.append(header)
    lines.append(rule)
    for label in sorted(agg):
        row = f"| {label} |"
        for m in _METRICS:
            for c in _CATEGORIES:
                cell = agg[label].get(c)
                row += f" {cell[m]:.4g} |" if cell else " - |"
        lines.append(row)
    (out / "report.md").write_text("\n".join(lines) + "\n")
