import json
from pathlib import Path

import numpy as np
import pytest

from rslf.cli import main

SIZE = 48


def _dataset(tmp_path, name="ds", preset="mixed", motion=0, seed=0):
    out = tmp_path / name
    rc = main([
        "synth", "--preset", preset, "--motion-index", str(motion),
        "--size", str(SIZE), "--views", "9", "--seed", str(seed),
        "--out", str(out),
    ])
    assert rc == 0
    return out


def _dir_bytes(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


class TestSynthCommand:
    def test_zero_motion_dataset_full_mask(self, tmp_path):
        ds = _dataset(tmp_path, motion=0, preset="plane")
        from rslf.io_formats import read_mask_png, read_motion_gt

        mask = read_mask_png(ds / "mask.png")
        h = w = SIZE
        assert mask[h // 2 : h // 2 + h, w // 2 : w // 2 + w].all()
        assert read_motion_gt(ds).is_zero()

    def test_byte_identical_reruns(self, tmp_path):
        a = _dataset(tmp_path, name="a", preset="checker", seed=7)
        b = _dataset(tmp_path, name="b", preset="checker", seed=7)
        assert _dir_bytes(a) == _dir_bytes(b)

    def test_fast_motion_shrinks_mask(self, tmp_path):
        from rslf.io_formats import read_mask_png

        static = _dataset(tmp_path, name="s", preset="sphere", motion=0)
        fast = _dataset(tmp_path, name="f", preset="sphere", motion=10)
        assert (read_mask_png(fast / "mask.png").sum()
                < read_mask_png(static / "mask.png").sum())

    def test_bad_motion_index(self, tmp_path):
        rc = main(["synth", "--preset", "plane", "--motion-index", "99",
                   "--size", str(SIZE), "--out", str(tmp_path / "x")])
        assert rc == 2


class TestReconstructCommand:
    def test_none_ablation_runs_and_writes(self, tmp_path):
        ds = _dataset(tmp_path)
        rc = main([
            "reconstruct", str(ds), "--out", str(tmp_path / "runs"),
            "--run-name", "r0", "--ablation", "none",
            "--iters", "5", "--gaussians", "150", "--seed", "0",
        ])
        assert rc == 0
        run = tmp_path / "runs" / "r0"
        manifest = json.loads((run / "run.json").read_text())
        assert manifest["ablation"] == "none"
        assert manifest["motion"]["omega"] == [0.0, 0.0, 0.0]

    def test_deterministic_reruns_identical_traces(self, tmp_path):
        ds = _dataset(tmp_path)
        for name in ("r1", "r2"):
            rc = main([
                "reconstruct", str(ds), "--out", str(tmp_path / "runs"),
                "--run-name", name, "--ablation", "full", "--deterministic",
                "--iters", "8", "--gaussians", "120", "--seed", "3",
            ])
            assert rc == 0
        m1 = json.loads((tmp_path / "runs" / "r1" / "run.json").read_text())
        m2 = json.loads((tmp_path / "runs" / "r2" / "run.json").read_text())
        assert m1["losses"] == m2["losses"]
        assert m1["fingerprint"] == m2["fingerprint"]
        assert m1["artifact_hashes"] == m2["artifact_hashes"]
        t1 = (tmp_path / "runs" / "r1" / "trace.csv").read_bytes()
        t2 = (tmp_path / "runs" / "r2" / "trace.csv").read_bytes()
        assert t1 == t2

    def test_missing_dataset_exit_code(self, tmp_path):
        rc = main(["reconstruct", str(tmp_path / "absent"),
                   "--out", str(tmp_path / "runs")])
        assert rc == 3

    def test_config_file_merging(self, tmp_path):
        ds = _dataset(tmp_path)
        cfg = tmp_path / "run.cfg"
        cfg.write_text("iters_stage1 = 4\niters_stage2 = 4\nn_gaussians = 100\nseed = 9\n")
        rc = main([
            "reconstruct", str(ds), "--out", str(tmp_path / "runs"),
            "--run-name", "rc", "--ablation", "no-motion", "--config", str(cfg),
        ])
        assert rc == 0
        manifest = json.loads((tmp_path / "runs" / "rc" / "run.json").read_text())
        assert manifest["config"]["iters_stage1"] == 4
        assert manifest["config"]["seed"] == 9

    def test_unknown_config_key(self, tmp_path):
        ds = _dataset(tmp_path)
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp_speed = 11\n")
        rc = main(["reconstruct", str(ds), "--out", str(tmp_path / "runs"),
                   "--config", str(cfg)])
        assert rc == 2


class TestEvaluateCommand:
    def test_gt_vs_gt_zero_errors(self, tmp_path):
        ds = _dataset(tmp_path, preset="plane")
        # craft a fake "perfect" run from the GT artifacts
        run = tmp_path / "perfect"
        run.mkdir()
        from rslf.io_formats import (
            read_mask_png, read_pfm, read_png16,
            write_mask_png, write_pfm, write_png16,
        )

        write_png16(run / "pred_intensity.png", read_png16(ds / "gt_central.png"))
        write_pfm(run / "pred_depth.pfm", read_pfm(ds / "gt_depth.pfm"))
        write_pfm(run / "pred_disparity.pfm", np.zeros((2 * SIZE, 2 * SIZE)))
        write_mask_png(run / "pred_valid.png", np.ones((2 * SIZE, 2 * SIZE), bool))
        (run / "run.json").write_text(json.dumps({
            "ablation": "gt", "dataset_dir": str(ds),
        }))
        rc = main(["evaluate", str(run), "--out", str(tmp_path / "report")])
        assert rc == 0
        report = json.loads((tmp_path / "report" / "report.json").read_text())
        row = report["per_scene"][0]
        assert row["abs_diff"] == 0.0
        assert row["delta_125"] == 1.0

    def test_full_flow_report_rows(self, tmp_path):
        ds = _dataset(tmp_path)
        for ablation in ("none", "no-motion"):
            rc = main([
                "reconstruct", str(ds), "--out", str(tmp_path / "runs"),
                "--run-name", ablation, "--ablation", ablation,
                "--iters", "5", "--gaussians", "150",
            ])
            assert rc == 0
        rc = main([
            "evaluate", str(tmp_path / "runs" / "none"),
            str(tmp_path / "runs" / "no-motion"),
            "--out", str(tmp_path / "report"),
        ])
        assert rc == 0
        md = (tmp_path / "report" / "report.md").read_text()
        assert "none" in md and "no-motion" in md

    def test_missing_artifact_names_file(self, tmp_path):
        ds = _dataset(tmp_path)
        empty = tmp_path / "empty_run"
        empty.mkdir()
        rc = main(["evaluate", str(empty), "--dataset", str(ds),
                   "--out", str(tmp_path / "report")])
        assert rc == 3

    def test_report_regeneration_idempotent(self, tmp_path):
        ds = _dataset(tmp_path, preset="plane")
        rc = main(["reconstruct", str(ds), "--out", str(tmp_path / "runs"),
                   "--run-name", "r", "--ablation", "none",
                   "--iters", "4", "--gaussians", "100"])
        assert rc == 0
        for _ in range(2):
            rc = main(["evaluate", str(tmp_path / "runs" / "r"),
                       "--out", str(tmp_path / "report")])
            assert rc == 0
        first = (tmp_path / "report" / "report.json").read_bytes()
        rc = main(["evaluate", str(tmp_path / "runs" / "r"),
                   "--out", str(tmp_path / "report")])
        assert (tmp_path / "report" / "report.json").read_bytes() == first


class TestGradcheckCommand:
    def test_default_passes(self, capsys):
        rc = main(["gradcheck", "--n", "6", "--seed", "0"])
        assert rc == 0
        assert "PASS" in capsys.readouterr().out

    def test_zero_configs_vacuous_pass(self, capsys):
        rc = main(["gradcheck", "--n", "0"])
        assert rc == 0
        assert "vacuous" in capsys.readouterr().out

    def test_corrupted_gradient_fails(self):
        rc = main(["gradcheck", "--n", "2", "--corrupt-gradient"])
        assert rc == 4
