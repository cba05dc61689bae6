"""Two-stage reconstruction pipeline and run orchestration.

Stage 1 fine-tunes the seeded splat cloud photometrically against a
subset of central-row SAIs (global-shutter renders: the learned geometry
is the scene "up to a motion").  Stage 2 freezes the cloud and estimates
the constant 6-DoF velocity by minimizing band-wise rolling-shutter
reprojection error over the four corner SAIs.  Compensation carries every
center to its static position and renders a double-field-of-view
global-shutter view, so content pushed outside the original frame
remains visible.

Optimization is Adam with per-parameter-class learning rates; each
iteration renders one (view, band) pair drawn from a seeded shuffled
round-robin.  Everything is deterministic given the config seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArgumentError, NumericalError
from .geometry import MotionParams, deform_to_static_many
from .initialization import (
    DisparityMap,
    default_gaussian_count,
    estimate_disparity_central_row,
    seed_gaussians,
)
from .io_formats import (
    dataset_fingerprint,
    write_cloud,
    write_mask_png,
    write_pfm,
    write_png16,
)
from .lightfield import LightField4D, band_ranges, central_row_views, corner_views
from .splat import (
    GaussianCloud,
    LFGeometry,
    RenderedBand,
    backward_band,
    gaussian_taus,
    normalized_disparity,
    render_band,
    render_view_gs,
)

ABLATIONS = ("full", "no-init", "no-motion", "none")


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer schedule; defaults follow the desk-scale pilot."""

    iters_stage1: int = 100
    iters_stage2: int = 100
    lr_position: float = 1e-3
    lr_sigma: float = 1e-2
    lr_intensity: float = 1e-2
    lr_omega: float = 1e-3
    lr_vel: float = 1e-3
    band_height: int = 16
    band_height_stage2: int | None = None  # None: max(1, H // 32), see stage2_motion
    stage2_margin: int = 8
    loss_norm: str = "L2"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_gaussians: int | None = None
    stage1_views: int = 5
    d_range: tuple[float, float] = (-2.0, 2.0)
    d_steps: int = 64
    d_window: int = 7
    background: float = 0.0

    def __post_init__(self):
        for name in ("iters_stage1", "iters_stage2", "band_height", "d_steps"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be >= 1")
        if self.band_height_stage2 is not None and self.band_height_stage2 < 1:
            raise ArgumentError("band_height_stage2 must be >= 1 when set")
        for name in ("lr_position", "lr_sigma", "lr_intensity", "lr_omega",
                     "lr_vel", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ArgumentError(f"{name} must be positive")
        if self.loss_norm not in ("L1", "L2"):
            raise ArgumentError(f"loss_norm must be L1 or L2, got {self.loss_norm!r}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["d_range"] = list(self.d_range)
        return d


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    u: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(m=np.zeros(n), u=np.zeros(n), t=0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One Adam update with bias correction; lr may be a per-entry vector."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ArgumentError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape}"
        )
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    u = beta2 * state.u + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    u_hat = u / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(u_hat) + eps)
    return new_params, AdamState(m=m, u=u, t=t)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def band_loss(pred: np.ndarray, measured: np.ndarray, norm: str):
    """Mean reprojection error over the band and its residual dL/dC."""
    diff = pred - measured
    n = diff.size
    if norm == "L2":
        return float(np.mean(diff * diff)), 2.0 * diff / n
    return float(np.mean(np.abs(diff))), np.sign(diff) / n


@dataclass
class TraceRow:
    iteration: int
    stage: str
    view_x: int
    view_y: int
    band_index: int
    loss: float


# ---------------------------------------------------------------------------
# Stage 1: photometric fine-tuning on the central view row
# ---------------------------------------------------------------------------


def _schedule(pairs: list, iters: int, rng: np.random.Generator):
    """Seeded shuffled round-robin over (view, band) pairs."""
    out = []
    while len(out) < iters:
        idx = rng.permutation(len(pairs))
        out.extend(pairs[i] for i in idx)
    return out[:iters]


def _first_bad_gaussian(cloud: GaussianCloud, grads=None) -> int:
    bad = ~np.isfinite(cloud.positions).all(axis=1)
    bad |= ~np.isfinite(cloud.sigmas)
    bad |= ~np.isfinite(cloud.intensities)
    if grads is not None:
        bad |= ~np.isfinite(grads.positions).all(axis=1)
        bad |= ~np.isfinite(grads.sigmas)
        bad |= ~np.isfinite(grads.intensities)
    hits = np.flatnonzero(bad)
    return int(hits[0]) if hits.size else -1


def stage1_finetune(
    cloud: GaussianCloud,
    lf: LightField4D,
    config: OptimConfig,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> GaussianCloud:
    """Fit the 5N splat parameters to the central-row SAIs (no motion)."""
    rng = rng or np.random.default_rng(config.seed)
    geom = LFGeometry.of(lf)
    views = central_row_views(lf, config.stage1_views)
    bands = band_ranges(lf.height, config.band_height)
    pairs = [(v, bi) for v in views for bi in range(len(bands))]
    schedule = _schedule(pairs, config.iters_stage1, rng)

    cloud = cloud.copy()
    n = len(cloud)
    lr = np.concatenate([
        np.full(3 * n, config.lr_position),
        np.full(n, config.lr_sigma),
        np.full(n, config.lr_intensity),
    ])
    state = AdamState.zeros(5 * n)

    for it, ((vx, vy), bi) in enumerate(schedule):
        band = bands[bi]
        out = render_band(cloud, geom, vx, vy, band, with_cache=True)
        measured = lf.sai_view(vx, vy)[band[0] : band[1]]
        loss, residual = band_loss(out.intensity, measured, config.loss_norm)
        if not np.isfinite(loss):
            raise NumericalError(
                f"stage1 loss became non-finite at iteration {it}; first "
                f"offending Gaussian index {_first_bad_gaussian(cloud)}"
            )
        grads = backward_band(out.cache, residual)
        flat_grads = np.concatenate([
            grads.positions.ravel(), grads.sigmas, grads.intensities
        ])
        if not np.all(np.isfinite(flat_grads)):
            raise NumericalError(
                f"stage1 gradient became non-finite at iteration {it}; first "
                f"offending Gaussian index {_first_bad_gaussian(cloud, grads)}"
            )
        new_flat, state = adam_step(
            cloud.pack(), flat_grads, state, lr,
            config.adam_beta1, config.adam_beta2, config.adam_eps,
        )
        cloud.unpack(new_flat)
        cloud.clamp()
        if trace is not None:
            trace.append(TraceRow(it, "stage1", vx, vy, bi, loss))
    return cloud


# ---------------------------------------------------------------------------
# Stage 2: motion estimation on the corner SAIs
# ---------------------------------------------------------------------------


def stage2_motion(
    cloud: GaussianCloud,
    lf: LightField4D,
    config: OptimConfig,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> MotionParams:
    """Estimate (omega, vel) by band-wise RS render-and-compare.

    Only the six motion parameters move; the cloud is read-only.  The
    per-Gaussian observation times are computed once up front (the cloud
    does not change, so they are constants of the stage).

    The stage-2 band height is a model parameter, not just a batch size:
    the intra-band time spread must stay below the disparity-times-
    row-period lever that carries the motion signal, so it defaults to
    H // 32 rather than the stage-1 batching height.

    The reprojection error is evaluated on a fixed interior window
    (``stage2_margin`` pixels in from every frame edge).  Margin pixels
    of non-central views can be unreachable by any splat seeded from the
    central view; their residuals do not inform the motion but do bias
    it toward cloud-spreading hypotheses.
    """
    rng = rng or np.random.default_rng(config.seed + 1)
    geom = LFGeometry.of(lf)
    views = corner_views(lf)
    bh = config.band_height_stage2 or max(1, lf.height // 32)
    margin = min(config.stage2_margin, (lf.height - 1) // 2, (lf.width - 1) // 2)
    bands = [
        (va, vb) for va, vb in band_ranges(lf.height, bh)
        if vb > margin and va < lf.height - margin
    ]
    pairs = [(v, bi) for v in views for bi in range(len(bands))]
    schedule = _schedule(pairs, config.iters_stage2, rng)
    taus = gaussian_taus(cloud, geom.intr, geom.timing)
    cols = slice(margin, lf.width - margin)

    params = np.zeros(6)
    lr = np.concatenate([np.full(3, config.lr_omega), np.full(3, config.lr_vel)])
    state = AdamState.zeros(6)

    def interior_rows(band):
        va, vb = band
        return max(va, margin) - va, min(vb, lf.height - margin) - va

    # Initial loss of every (view, band) pair at zero motion; the
    # divergence guard compares each visit against its own pair.
    baseline = {}
    for (vx, vy), bi in pairs:
        band = bands[bi]
        r0, r1 = interior_rows(band)
        out = render_band(cloud, geom, vx, vy, band, motion=MotionParams(), taus=taus)
        measured = lf.sai_view(vx, vy)[band[0] : band[1]]
        loss, _ = band_loss(out.intensity[r0:r1, cols], measured[r0:r1, cols],
                            config.loss_norm)
        baseline[((vx, vy), bi)] = max(loss, 1e-12)
    runaway = 0

    for it, ((vx, vy), bi) in enumerate(schedule):
        band = bands[bi]
        r0, r1 = interior_rows(band)
        motion = MotionParams(tuple(params[:3]), tuple(params[3:]))
        out = render_band(cloud, geom, vx, vy, band, motion=motion,
                          with_cache=True, taus=taus)
        measured = lf.sai_view(vx, vy)[band[0] : band[1]]
        loss, res_inner = band_loss(out.intensity[r0:r1, cols],
                                    measured[r0:r1, cols], config.loss_norm)
        if not np.isfinite(loss):
            raise NumericalError(f"stage2 loss became non-finite at iteration {it}")
        if loss > 10.0 * baseline[((vx, vy), bi)]:
            runaway += 1
            if runaway >= 20:
                raise NumericalError(
                    f"stage2 diverged: loss {loss:.3g} above 10x the initial "
                    f"level for 20 consecutive iterations (iteration {it})"
                )
        else:
            runaway = 0
        residual = np.zeros_like(out.intensity)
        residual[r0:r1, cols] = res_inner
        grads = backward_band(out.cache, residual)
        gvec = np.concatenate([grads.omega, grads.vel])
        params, state = adam_step(
            params, gvec, state,
            lr, config.adam_beta1, config.adam_beta2, config.adam_eps,
        )
        if trace is not None:
            trace.append(TraceRow(it, "stage2", vx, vy, bi, loss))
    return MotionParams(tuple(params[:3]), tuple(params[3:]))


# ---------------------------------------------------------------------------
# Compensation
# ---------------------------------------------------------------------------


def compensate(
    cloud: GaussianCloud,
    motion: MotionParams,
    geom: LFGeometry,
) -> tuple[GaussianCloud, RenderedBand]:
    """Static cloud + double-FOV global-shutter central render.

    Every center moves to its static (tau = 0) position under ``motion``;
    the canvas is doubled with a recentered principal point so content
    pushed outside the original field of view is kept.
    """
    taus = gaussian_taus(cloud, geom.intr, geom.timing)
    static_positions = deform_to_static_many(cloud.positions, taus, motion)
    static_cloud = GaussianCloud(
        static_positions, cloud.sigmas.copy(), cloud.intensities.copy(),
        cloud.background,
    )
    big = geom.with_canvas(
        2 * geom.width, 2 * geom.height,
        geom.intr.recentered(geom.width / 2.0, geom.height / 2.0),
    )
    x0, y0 = geom.center_index
    render = render_view_gs(static_cloud, big, x0, y0, band_height=geom.height)
    return static_cloud, render


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    cloud: GaussianCloud
    static_cloud: GaussianCloud
    motion: MotionParams
    render: RenderedBand
    disparity_map: DisparityMap
    manifest: dict
    trace: list


def _config_hash(config: OptimConfig, ablation: str) -> str:
    blob = json.dumps({"config": config.to_dict(), "ablation": ablation},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:8]


def _manifest_fingerprint(manifest: dict) -> str:
    volatile = {"wall_clock_s", "fingerprint", "run_dir"}
    stable = {k: v for k, v in manifest.items() if k not in volatile}
    return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()


def run_full(
    lf: LightField4D,
    config: OptimConfig,
    ablation: str = "full",
    out_dir=None,
    dataset_dir=None,
) -> RunResult:
    """Seed -> [stage1] -> [stage2 + compensation], with artifacts.

    Ablations: ``none`` seeds only, ``no-motion`` skips stage 2,
    ``no-init`` skips stage 1, ``full`` runs both.  All ablations render
    the final double-FOV view (with zero motion where stage 2 is off), so
    their outputs are directly comparable.
    """
    ablation = ablation.replace("_", "-")
    if ablation not in ABLATIONS:
        raise ArgumentError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    seed_rng, s1_rng, s2_rng = rng.spawn(3)
    geom = LFGeometry.of(lf)
    trace: list[TraceRow] = []

    disparity = estimate_disparity_central_row(
        lf, config.d_range, config.d_steps, config.d_window
    )
    x0, y0 = lf.center_index
    central = lf.sai_view(x0, y0)
    n = config.n_gaussians or default_gaussian_count(lf.width, lf.height)
    cloud = seed_gaussians(central, disparity, n, lf.intrinsics,
                           rng=seed_rng, background=config.background)

    if ablation in ("full", "no-motion"):
        cloud = stage1_finetune(cloud, lf, config, rng=s1_rng, trace=trace)

    if ablation in ("full", "no-init"):
        motion = stage2_motion(cloud, lf, config, rng=s2_rng, trace=trace)
    else:
        motion = MotionParams()

    static_cloud, render = compensate(cloud, motion, geom)

    manifest = {
        "version": __version__,
        "ablation": ablation,
        "config": config.to_dict(),
        "n_gaussians": int(len(cloud)),
        "dataset_hash": dataset_fingerprint(dataset_dir) if dataset_dir else None,
        "dataset_dir": str(dataset_dir) if dataset_dir else None,
        "losses": [round(r.loss, 12) for r in trace],
        "motion": {"omega": list(motion.omega), "vel": list(motion.vel)},
        "disparity_valid_fraction": disparity.valid_fraction,
    }

    result = RunResult(
        cloud=cloud, static_cloud=static_cloud, motion=motion, render=render,
        disparity_map=disparity, manifest=manifest, trace=trace,
    )
    if out_dir is not None:
        write_run_artifacts(result, out_dir, geom)
    manifest["wall_clock_s"] = time.perf_counter() - t0
    manifest["fingerprint"] = _manifest_fingerprint(manifest)
    if out_dir is not None:
        (Path(out_dir) / "run.json").write_text(
            json.dumps(manifest, indent=1, sort_keys=True)
        )
    return result


def write_run_artifacts(result: RunResult, out_dir, geom: LFGeometry) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    write_cloud(out / "cloud.bin", result.cloud.positions, result.cloud.sigmas,
                result.cloud.intensities, result.cloud.background)
    write_cloud(out / "static_cloud.bin", result.static_cloud.positions,
                result.static_cloud.sigmas, result.static_cloud.intensities,
                result.static_cloud.background, json_mirror=False)
    (out / "motion.json").write_text(json.dumps(result.manifest["motion"], sort_keys=True))

    render = result.render
    write_png16(out / "pred_intensity.png", np.clip(render.intensity, 0.0, 1.0))
    disp, valid = normalized_disparity(render)
    write_pfm(out / "pred_disparity.pfm", disp)
    write_mask_png(out / "pred_valid.png", valid)
    intr = geom.intr
    denom = disp * intr.Pf * intr.w + intr.beta
    ok = valid & (denom > 1e-9)
    depth = np.zeros_like(disp)
    np.divide(intr.beta * intr.Pf, denom, out=depth, where=ok)
    write_pfm(out / "pred_depth.pfm", depth)
    write_pfm(out / "init_disparity.pfm", result.disparity_map.values)
    write_mask_png(out / "init_disparity_valid.png", result.disparity_map.valid)

    with open(out / "trace.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "stage", "view_x", "view_y", "band", "loss"])
        for r in result.trace:
            wr.writerow([r.iteration, r.stage, r.view_x, r.view_y,
                         r.band_index, f"{r.loss:.12g}"])

    hashes = {}
    for name in sorted(p.name for p in out.iterdir() if p.name != "run.json"):
        hashes[name] = hashlib.sha256((out / name).read_bytes()).hexdigest()
    result.manifest["artifact_hashes"] = hashes
    result.manifest["run_dir"] = str(out)


def read_manifest(run_dir) -> dict:
    return json.loads((Path(run_dir) / "run.json").read_text())
