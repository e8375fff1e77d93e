import csv
import io
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from invlab.attack import LIKELIHOOD_COLUMNS, read_pgm
from invlab.fisher import FI_COLUMNS
from invlab.lab import pipeline
from invlab.lab.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main
from invlab.lab.config import DEFAULTS, LabConfigError, load_config, schema_document
from invlab.lab.pipeline import Lab, downsample, run_config
from invlab.lab.report import (
    REPORT_FILES,
    TIMING_COLUMNS,
    emit_report,
    matched_accuracy_compare,
    sweep_freeze,
)
from invlab.metrics import SUMMARY_COLUMNS

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def smoke(tmp_path, **over) -> dict:
    raw = json.loads((CONFIGS / "smoke_blobs.json").read_text())
    raw["out"] = str(tmp_path / "out")
    raw.update(over)
    return raw


def write_config(tmp_path, raw) -> Path:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    """One finished smoke sweep, reused by the read-only tests."""
    tmp = tmp_path_factory.mktemp("sweep")
    cfg = load_config(smoke(tmp, first_layer_control=True))
    result = run_config(cfg)
    paths = emit_report(result)
    return cfg, result, paths


def fake_result(cfg, curves: dict) -> pipeline.SweepResult:
    """A SweepResult whose cells carry the given (natural_acc, att_top1) points."""
    cells = []
    for sid, pts in curves.items():
        for epoch, (acc, att) in enumerate(pts, start=1):
            report = dict(
                setup_id=f"{sid}/ep{epoch:04d}", seed=0, theta_c=1, natural_acc=acc, att_top1=att,
                att_top1_std=0.0, att_top5=att, knn_dist=0.0, delta_eval=0.0, l2_centroid=0.0, train_seconds=0.0,
            )
            cells.append({"status": "done", "seed": 0, "setup": sid, "epoch": epoch, "report": report})
    return pipeline.SweepResult(cfg, cells, [], [], {})


def read_csv(path) -> list[dict]:
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


class TestConfig:
    def test_defaults_filled(self, tmp_path):
        cfg = load_config({"seeds": [1]}, base_dir=tmp_path)
        assert cfg["attack"]["iterations"] == DEFAULTS["attack"]["iterations"]
        assert cfg["seeds"] == [1]

    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(LabConfigError) as err:
            load_config({"seedz": [0]}, base_dir=tmp_path)
        assert err.value.pointer == "/seedz"
        assert "seedz" in str(err.value)

    def test_unknown_nested_key(self, tmp_path):
        with pytest.raises(LabConfigError) as err:
            load_config({"attack": {"iters": 3}}, base_dir=tmp_path)
        assert err.value.pointer == "/attack/iters"

    @pytest.mark.parametrize(
        "raw,pointer",
        [
            ({"seeds": []}, "/seeds"),
            ({"boundaries": [9]}, "/boundaries/0"),
            ({"attack": {"iterations": 0}}, "/attack/iterations"),
            ({"fisher": {"snapshots": [400]}}, "/fisher/snapshots"),
            ({"seeds": [0, 0]}, "/seeds"),
            ({"data": {"source": "idx", "images": "nope", "labels": "nope"}}, "/data/images"),
            ({"first_layer_control": {"k_first": 4}}, "/first_layer_control/k_first"),
        ],
    )
    def test_invalid_values_point_at_the_culprit(self, tmp_path, raw, pointer):
        with pytest.raises(LabConfigError) as err:
            load_config(raw, base_dir=tmp_path)
        assert err.value.pointer == pointer

    def test_relative_out_resolves_against_config_dir(self, tmp_path):
        path = write_config(tmp_path, {"out": "runs/x"})
        assert load_config(path).out_dir == tmp_path / "runs" / "x"

    def test_schema_document_is_json(self):
        doc = json.loads(schema_document())
        assert set(doc) == {"schema", "defaults"}
        assert doc["schema"]["additionalProperties"] is False

    def test_overrides(self, tmp_path):
        cfg = load_config(smoke(tmp_path), base_dir=tmp_path).with_overrides(boundary=1, seed=5)
        assert cfg["boundaries"] == [1] and cfg["seeds"] == [5]


def test_downsample_block_mean():
    img = np.arange(16, dtype=np.float32).reshape(1, 16)
    out, shape = downsample(img, (4, 4), 2)
    assert shape == (2, 2)
    np.testing.assert_allclose(out[0], [2.5, 4.5, 10.5, 12.5])


class TestSweep:
    def test_one_row_per_checkpoint(self, tmp_path):
        cfg = load_config(smoke(tmp_path, boundaries=[0]))
        result = run_config(cfg)
        assert [c["epoch"] for c in result.cells] == [2, 4]
        assert not result.failures
        assert set(result.manifest["cells"]) == {"s0/b0/ep2", "s0/b0/ep4"}

    def test_artifacts(self, swept):
        cfg, result, paths = swept
        assert set(REPORT_FILES) <= set(paths)
        assert result.setups == ["b0", "b1", "first1"]
        out = cfg.out_dir
        for seed_file in ("split.json", "pretrain.ckpt", "prior.ckpt", "eval.ckpt"):
            assert (out / "seed0" / seed_file).exists()
        assert (out / "seed0" / "b1" / "ep0004.ckpt").exists()

    def test_control_matches_theta_c(self, swept):
        _, result, _ = swept
        c = result.control
        assert c["first_setup"] == "first1" and c["matched_setup"] == "b1"

    def test_summary_columns(self, swept):
        _, _, paths = swept
        assert paths["summary.csv"].read_text().splitlines()[0].split(",") == SUMMARY_COLUMNS

    def test_fi_and_likelihood_columns(self, swept):
        cfg, result, paths = swept
        assert paths["fi_layers.csv"].read_text().splitlines()[0].split(",") == ["setup_id", "seed", *FI_COLUMNS]
        rows = read_csv(paths["likelihoods.csv"])
        assert list(rows[0]) == ["setup_id", "seed", "epoch", *LIKELIHOOD_COLUMNS]
        per_cell = 3 * cfg["attack"]["attacks_per_class"]
        assert len(rows) == per_cell * len(result.cells)

    def test_timing_ratio_of_full_finetune_is_one(self, swept):
        _, _, paths = swept
        rows = read_csv(paths["timing.csv"])
        assert list(rows[0]) == TIMING_COLUMNS
        by_setup = {r["setup_id"]: r for r in rows}
        assert by_setup["b0"]["ratio"] == "1.00"
        assert int(by_setup["b1"]["grad_flops"]) <= int(by_setup["b0"]["grad_flops"])

    def test_grids_are_pgm(self, swept):
        cfg, result, paths = swept
        grids = [p for name, p in paths.items() if name.startswith("grid_")]
        assert len(grids) == len(result.setups)
        # 4x4 images: one row per class (3), one column per restart (2)
        assert read_pgm(grids[0]).shape == (3 * 5 + 1, 2 * 5 + 1)

    def test_summary_json(self, swept):
        _, _, paths = swept
        doc = json.loads(paths["summary.json"].read_text())
        assert doc["columns"] == SUMMARY_COLUMNS
        assert "b0/ep0004" in doc["aggregates"]
        assert [(c["setup_a"], c["setup_b"]) for c in doc["comparisons"]] == [
            ("b0", "b1"), ("b1", "first1")
        ]

    def test_rerun_is_idempotent(self, tmp_path):
        cfg = load_config(smoke(tmp_path))
        emit_report(run_config(cfg))
        out = cfg.out_dir
        before = {p: p.stat().st_mtime_ns for p in out.rglob("*.ckpt")}
        summary = (out / "summary.csv").read_bytes()
        emit_report(run_config(cfg))
        assert {p: p.stat().st_mtime_ns for p in out.rglob("*.ckpt")} == before
        assert (out / "summary.csv").read_bytes() == summary

    def test_fresh_directory_gives_identical_summary(self, tmp_path, swept):
        cfg, _, paths = swept
        again = load_config({**cfg.raw, "out": str(tmp_path / "again")})
        emit_report(run_config(again))
        assert (tmp_path / "again" / "summary.csv").read_bytes() == paths["summary.csv"].read_bytes()

    def test_failed_cell_is_recorded(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("injected")

        monkeypatch.setattr(pipeline, "attack_campaign", boom)
        cfg = load_config(smoke(tmp_path, boundaries=[0], fisher={"enabled": False, "snapshots": [20]}))
        result = run_config(cfg)
        assert not result.cells and len(result.failures) == 2
        assert all("injected" in f["error"] for f in result.failures)
        assert {v["status"] for v in result.manifest["cells"].values()} == {"failed"}


class TestCurvesAndComparisons:
    def test_two_curves_sorted(self, swept):
        _, result, _ = swept
        curves = sweep_freeze(result, setups=[0, 1])
        assert list(curves) == ["b0", "b1"]
        for pts in curves.values():
            accs = [p.natural_acc for p in pts]
            assert accs == sorted(accs)

    def test_single_curve_warns(self, swept):
        _, result, _ = swept
        with pytest.warns(RuntimeWarning):
            sweep_freeze(result, setups=["b0"])

    def test_self_comparison(self, swept):
        _, result, _ = swept
        cmp = matched_accuracy_compare(result, 0, 0)
        assert cmp.rows and all(r["att_a"] == r["att_b"] for r in cmp.rows)
        assert cmp.ratio == pytest.approx(1.0)

    def test_zero_tolerance_on_disjoint_accuracies(self, swept):
        cfg = swept[0]
        result = fake_result(cfg, {"b0": [(80.0, 60.0), (90.0, 70.0)], "b2": [(81.0, 30.0), (91.5, 35.0)]})
        with pytest.warns(RuntimeWarning):
            cmp = matched_accuracy_compare(result, 0, 2, tolerance=0.0)
        assert not cmp.rows and cmp.dropped == 2

    def test_pairs_nearest_within_tolerance(self, swept):
        cfg = swept[0]
        result = fake_result(cfg, {"b0": [(80.0, 60.0), (90.0, 70.0)], "b2": [(81.0, 30.0), (93.5, 35.0)]})
        cmp = matched_accuracy_compare(result, 0, 2, tolerance=2.0)
        assert cmp.dropped == 1
        (row,) = cmp.rows
        assert (row["acc_a"], row["acc_b"], row["att_b"]) == (80.0, 81.0, 30.0)
        assert row["delta"] is None  # the defended side is more accurate
        assert cmp.ratio == pytest.approx(0.5)

    def test_missing_setup(self, swept):
        _, result, _ = swept
        with pytest.raises(KeyError):
            matched_accuracy_compare(result, 0, 3)


class TestCli:
    def test_unknown_key_exit_code(self, tmp_path, capsys):
        path = write_config(tmp_path, {"bogus": 1})
        assert main(["sweep", "--config", str(path)]) == EXIT_CONFIG
        assert "/bogus" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["split", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG

    def test_print_schema(self, capsys):
        assert main(["--print-schema"]) == EXIT_OK
        assert "defaults" in json.loads(capsys.readouterr().out)

    def test_split_prints_manifest(self, tmp_path, capsys):
        path = write_config(tmp_path, smoke(tmp_path))
        assert main(["split", "--config", str(path)]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["priv_classes"] == [3, 4, 5]

    def test_stage_commands(self, tmp_path, capsys):
        path = write_config(tmp_path, smoke(tmp_path))
        for cmd in ("train", "train-prior", "train-eval", "attack", "fisher", "evaluate", "report"):
            assert main([cmd, "--config", str(path), "--boundary", "1"]) == EXIT_OK, cmd
        out = capsys.readouterr().out
        assert "s0/b1/ep4: theta_c=" in out

    def test_gen_data_round_trips(self, tmp_path, capsys):
        from invlab.data import load_idx

        path = write_config(tmp_path, smoke(tmp_path))
        assert main(["gen-data", "--config", str(path)]) == EXIT_OK
        info = json.loads(capsys.readouterr().out)
        ds = load_idx(info["images"], info["labels"])
        assert len(ds) == 240 and info["shape"] == [4, 4]

    def test_sweep_and_partial_failure(self, tmp_path, monkeypatch):
        path = write_config(tmp_path, smoke(tmp_path, boundaries=[0]))
        assert main(["sweep", "--config", str(path)]) == EXIT_OK
        shutil.rmtree(tmp_path / "out" / "cells")
        monkeypatch.setattr(pipeline, "attack_campaign", lambda *a, **k: 1 / 0)
        assert main(["sweep", "--config", str(path)]) == EXIT_PARTIAL

    def test_out_override(self, tmp_path):
        path = write_config(tmp_path, smoke(tmp_path, boundaries=[0]))
        assert main(["split", "--config", str(path), "--out", str(tmp_path / "elsewhere")]) == EXIT_OK
        assert (tmp_path / "elsewhere" / "seed0" / "split.json").exists()
