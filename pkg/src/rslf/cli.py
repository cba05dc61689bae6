"""Command-line entry point: synth / reconstruct / evaluate / gradcheck.

Every run echoes its fully resolved configuration into its manifest and
is replayable from that manifest alone.  Exit codes: 0 success,
2 argument error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArgumentError, DataError, NumericalError, RslfError
from .evaluation import evaluate_run, write_report
from .geometry import MotionParams
from .io_formats import read_lightfield
from .pipeline import OptimConfig, run_full
from .splat import LFGeometry, render_band, backward_band
from .synth import (
    SceneSpec,
    default_intrinsics,
    motion_suite,
    read_scene_spec,
    render_rslf,
    scene_preset,
    write_scene_artifacts,
)

EXIT_OK = 0
EXIT_ARGUMENT = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_PRESETS = ("plane", "checker", "sphere", "mixed")


def _load_config_file(path: str) -> dict:
    """Flat TOML-style key = value pairs (strings, numbers, booleans)."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        val = val.strip("\"'")
        if val.lower() in ("true", "false"):
            out[key] = val.lower() == "true"
        else:
            try:
                out[key] = int(val)
            except ValueError:
                try:
                    out[key] = float(val)
                except ValueError:
                    out[key] = val
    return out


def _build_optim_config(args) -> OptimConfig:
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config))
    overrides = {
        "iters_stage1": args.iters,
        "iters_stage2": args.iters,
        "n_gaussians": args.gaussians,
        "band_height": args.band,
        "seed": args.seed,
    }
    for key, val in overrides.items():
        if val is not None:
            merged[key] = val
    if getattr(args, "band_stage2", None) is not None:
        merged["band_height_stage2"] = args.band_stage2
    allowed = set(OptimConfig.__dataclass_fields__)
    unknown = set(merged) - allowed
    if unknown:
        raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
    if "d_range" in merged and isinstance(merged["d_range"], str):
        lo, hi = (float(t) for t in merged["d_range"].split(":"))
        merged["d_range"] = (lo, hi)
    return OptimConfig(**merged)


def cmd_synth(args) -> int:
    if args.scene_json:
        spec = read_scene_spec(Path(args.scene_json).parent) \
            if Path(args.scene_json).is_dir() else \
            SceneSpec.from_dict(json.loads(Path(args.scene_json).read_text()))
        if args.motion_index is not None:
            intr = spec.intr
            suite = motion_suite(intr, spec.width, spec.height)
            spec.motion = suite[args.motion_index]
    else:
        intr = default_intrinsics(args.size, args.size)
        suite = motion_suite(intr, args.size, args.size)
        index = args.motion_index if args.motion_index is not None else 0
        if not 0 <= index < len(suite):
            raise ArgumentError(f"motion index {index} out of range [0, {len(suite)})")
        spec = scene_preset(args.preset, suite[index], size=args.size,
                            num_views=args.views, seed=args.seed or 0)
    artifacts = render_rslf(spec, workers=args.workers)
    write_scene_artifacts(artifacts, args.out)
    print(f"wrote dataset to {args.out} "
          f"(A={spec.num_views}, {spec.width}x{spec.height})")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    config = _build_optim_config(args)
    lf = read_lightfield(args.dataset)
    if args.run_name:
        run_dir = Path(args.out) / args.run_name
    else:
        blob = json.dumps(config.to_dict(), sort_keys=True).encode()
        tag = hashlib.sha256(blob + args.ablation.encode()).hexdigest()[:8]
        stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
        run_dir = Path(args.out) / f"{stamp}-{tag}"
    result = run_full(lf, config, ablation=args.ablation, out_dir=run_dir,
                      dataset_dir=args.dataset)
    m = result.motion
    print(f"run dir: {run_dir}")
    print(f"motion estimate: omega={list(np.round(m.omega, 6))} "
          f"vel={list(np.round(m.vel, 6))}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    reports = []
    for run_dir in args.runs:
        manifest_path = Path(run_dir) / "run.json"
        dataset = args.dataset
        if dataset is None and manifest_path.is_file():
            dataset = json.loads(manifest_path.read_text()).get("dataset_dir")
        if dataset is None:
            raise ArgumentError(
                f"{run_dir}: no dataset recorded in run.json; pass --dataset"
            )
        reports.append(evaluate_run(run_dir, dataset))
    write_report(reports, args.out)
    print(f"wrote report.json and report.md to {args.out}")
    for rep in reports:
        print(f"  {rep.label:12s} [{rep.category}] abs_diff={rep.abs_diff:.4f} "
              f"rmse={rep.rmse:.4f} delta<1.25={rep.delta_125:.3f} "
              f"rmse_int={rep.rmse_intensity:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.n == 0:
        print("gradcheck: no configurations requested; vacuous pass")
        return EXIT_OK
    rng = np.random.default_rng(args.seed)
    size = 20
    intr = default_intrinsics(size, size)
    from .lightfield import RSTiming
    from .splat import GaussianCloud

    geom = LFGeometry(5, size, size, intr, RSTiming.for_frame(size, size / 2))
    worst = 0.0
    h = 1e-4
    d_floor = -intr.beta / (intr.Pf * intr.w)
    for i in range(args.n):
        n = int(rng.integers(2, 13))
        from rslf.geometry import points_from_disparity

        u = rng.uniform(3, size - 3, n)
        v = rng.uniform(3, size - 3, n)
        d = rng.uniform(0.6 * d_floor, 1.2, n)
        cloud = GaussianCloud(
            points_from_disparity(u, v, d, intr),
            rng.uniform(0.8, 2.5, n), rng.uniform(0.1, 0.9, n),
        )
        motion = MotionParams(tuple(rng.uniform(-0.3, 0.3, 3)),
                              tuple(rng.uniform(-0.2, 0.2, 3)))
        x = int(rng.integers(0, 5))
        y = int(rng.integers(0, 5))
        band = (4, 16)
        residual = rng.standard_normal((12, size))
        out = render_band(cloud, geom, x, y, band, motion=motion, with_cache=True)
        grads = backward_band(out.cache, residual)
        if args.corrupt_gradient:
            grads.positions += 1.0
        from .splat import gaussian_taus

        taus0 = gaussian_taus(cloud, intr, geom.timing)

        def loss(c, m):
            o = render_band(c, geom, x, y, band, motion=m, taus=taus0)
            return float(np.sum(residual * o.intensity))

        fd_pos = np.zeros((n, 3))
        for j in range(n):
            for k in range(3):
                cp = cloud.copy(); cp.positions[j, k] += h
                cm = cloud.copy(); cm.positions[j, k] -= h
                fd_pos[j, k] = (loss(cp, motion) - loss(cm, motion)) / (2 * h)
        fd_om = np.zeros(3)
        fd_vel = np.zeros(3)
        w0 = np.array(motion.omega)
        v0 = np.array(motion.vel)
        for k in range(3):
            wp, wm = w0.copy(), w0.copy()
            wp[k] += h; wm[k] -= h
            fd_om[k] = (loss(cloud, MotionParams(tuple(wp), tuple(v0)))
                        - loss(cloud, MotionParams(tuple(wm), tuple(v0)))) / (2 * h)
            vp, vm = v0.copy(), v0.copy()
            vp[k] += h; vm[k] -= h
            fd_vel[k] = (loss(cloud, MotionParams(tuple(w0), tuple(vp)))
                         - loss(cloud, MotionParams(tuple(w0), tuple(vm)))) / (2 * h)

        def rel(a, b):
            scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
            return float(np.max(np.abs(a - b)) / scale)

        err = max(rel(grads.positions, fd_pos), rel(grads.omega, fd_om),
                  rel(grads.vel, fd_vel))
        worst = max(worst, err)
    status = "PASS" if worst < 1e-4 else "FAIL"
    print(f"gradcheck: {args.n} configurations, max relative error {worst:.3e} [{status}]")
    return EXIT_OK if status == "PASS" else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rslf",
        description="Rolling-shutter light-field reconstruction with 2D Gaussian splats",
    )
    parser.add_argument("--version", action="version", version=f"rslf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RS light-field dataset")
    p.add_argument("--preset", choices=_PRESETS, default="mixed")
    p.add_argument("--scene-json", help="render an explicit scene spec instead of a preset")
    p.add_argument("--motion-index", type=int, default=None,
                   help="index into the 11-motion suite (0 = static)")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--views", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reconstruct", help="run the two-stage reconstruction")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="parent directory for the run")
    p.add_argument("--run-name", help="fixed run directory name (default: timestamp-confighash)")
    p.add_argument("--ablation", choices=["full", "no-init", "no-motion", "none"],
                   default="full")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--gaussians", type=int, default=None)
    p.add_argument("--band", type=int, default=None)
    p.add_argument("--band-stage2", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--deterministic", action="store_true",
                   help="single-worker execution (the default engine already is)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score runs against their datasets")
    p.add_argument("runs", nargs="+")
    p.add_argument("--dataset", default=None,
                   help="dataset dir (default: from each run manifest)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the renderer gradients")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ArgumentError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RslfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
