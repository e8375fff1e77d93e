"""Curves, accuracy-matched comparisons and report files for a sweep."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..attack import LIKELIHOOD_COLUMNS, image_grid, write_pgm
from ..fisher import FI_COLUMNS, FisherReport, layer_importance_report
from ..metrics import SUMMARY_COLUMNS, UndefinedRatioError, aggregate_runs, robustness_delta, summary_csv
from .pipeline import SweepResult

__all__ = ["CurvePoint", "Comparison", "sweep_freeze", "curves_csv", "matched_accuracy_compare", "emit_report"]

REPORT_FILES = ("summary.csv", "summary.json", "fi_layers.csv", "likelihoods.csv", "timing.csv")


@dataclass(frozen=True)
class CurvePoint:
    natural_acc: float
    att_top1: float
    seed: int
    epoch: int


def _setup_id(s) -> str:
    return f"b{s}" if isinstance(s, (int, np.integer)) else str(s)


def sweep_freeze(result: SweepResult, setups=None) -> dict[str, list[CurvePoint]]:
    """One attack-vs-accuracy polyline per setup, points sorted by natural accuracy."""
    ids = [_setup_id(s) for s in setups] if setups is not None else [s for s in result.setups if s.startswith("b")]
    curves = {}
    for sid in ids:
        pts = [
            CurvePoint(c["report"]["natural_acc"], c["report"]["att_top1"], c["seed"], c["epoch"])
            for c in result.setup_cells(sid)
        ]
        curves[sid] = sorted(pts, key=lambda p: (p.natural_acc, p.seed, p.epoch))
    if len(curves) < 2:
        warnings.warn("fewer than two setups; curves cannot be compared", RuntimeWarning, stacklevel=2)
    for sid, pts in curves.items():
        if len(pts) < 2:
            warnings.warn(f"setup {sid} has fewer than two points", RuntimeWarning, stacklevel=2)
    return curves


def curves_csv(curves: dict[str, list[CurvePoint]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setup", "seed", "epoch", "natural_acc", "att_top1"])
    for sid, pts in curves.items():
        for p in pts:
            w.writerow([sid, p.seed, p.epoch, f"{p.natural_acc:.4f}", f"{p.att_top1:.4f}"])
    return buf.getvalue()


@dataclass
class Comparison:
    setup_a: str
    setup_b: str
    tolerance: float
    rows: list[dict]
    dropped: int

    @property
    def mean_att_a(self) -> float:
        return float(np.mean([r["att_a"] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_att_b(self) -> float:
        return float(np.mean([r["att_b"] for r in self.rows])) if self.rows else float("nan")

    @property
    def ratio(self) -> float:
        """Mean attack accuracy of ``b`` over that of ``a`` across matched pairs."""
        return self.mean_att_b / self.mean_att_a if self.rows and self.mean_att_a > 0 else float("nan")

    def for_seed(self, seed: int) -> "Comparison":
        return Comparison(self.setup_a, self.setup_b, self.tolerance, [r for r in self.rows if r["seed"] == seed], 0)

    def to_dict(self) -> dict:
        return {
            "setup_a": self.setup_a,
            "setup_b": self.setup_b,
            "tolerance": self.tolerance,
            "pairs": len(self.rows),
            "dropped": self.dropped,
            "mean_att_a": self.mean_att_a if self.rows else None,
            "mean_att_b": self.mean_att_b if self.rows else None,
            "ratio": self.ratio if self.rows else None,
            "rows": self.rows,
        }


def matched_accuracy_compare(result: SweepResult, setup_a, setup_b, tolerance: float = 2.0) -> Comparison:
    """Pair every checkpoint of ``a`` with the nearest-accuracy checkpoint of ``b`` (same seed).

    Pairs further apart than ``tolerance`` points are dropped and counted.
    ``delta`` is the robustness ratio when ``a`` is the more accurate side.
    """
    a, b = _setup_id(setup_a), _setup_id(setup_b)
    if not result.setup_cells(a) or not result.setup_cells(b):
        raise KeyError(f"setups {a!r} and {b!r} must both be present")
    rows, dropped = [], 0
    for seed in result.seeds:
        cand = result.setup_cells(b, seed)
        for ca in sorted(result.setup_cells(a, seed), key=lambda c: c["epoch"]):
            ra = ca["report"]
            if not cand:
                dropped += 1
                continue
            cb = min(cand, key=lambda c: (abs(c["report"]["natural_acc"] - ra["natural_acc"]), c["epoch"]))
            rb = cb["report"]
            if abs(rb["natural_acc"] - ra["natural_acc"]) > tolerance:
                dropped += 1
                continue
            try:
                delta = robustness_delta(ra["natural_acc"], ra["att_top1"], rb["natural_acc"], rb["att_top1"])
            except UndefinedRatioError:
                delta = None
            rows.append(
                {
                    "seed": seed,
                    "epoch_a": ca["epoch"],
                    "acc_a": ra["natural_acc"],
                    "att_a": ra["att_top1"],
                    "epoch_b": cb["epoch"],
                    "acc_b": rb["natural_acc"],
                    "att_b": rb["att_top1"],
                    "delta": delta,
                }
            )
    if not rows:
        warnings.warn(f"no {a}/{b} pairs within {tolerance} points", RuntimeWarning, stacklevel=2)
    return Comparison(a, b, tolerance, rows, dropped)


def _fisher_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setup_id", "seed", *FI_COLUMNS])
    for f in result.fisher:
        if f["status"] != "done":
            continue
        reports = [FisherReport(**r) for r in f["reports"]]
        body = layer_importance_report(reports).splitlines()[1:]
        for line in body:
            w.writerow([f["setup"], f["seed"], *line.split(",")])
    return buf.getvalue()


def _likelihood_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setup_id", "seed", "epoch", *LIKELIHOOD_COLUMNS])
    for c in result.cells:
        for r in c["likelihoods"]:
            w.writerow(
                [c["setup"], c["seed"], c["epoch"], r["class"], r["restart"], f"{r['likelihood']:.6f}",
                 r["eval_pred"], r["success"]]
            )
    return buf.getvalue()


TIMING_COLUMNS = ["setup_id", "seed", "theta_c", "epochs", "grad_flops", "train_seconds", "wall_seconds", "ratio"]


def _timing_rows(result: SweepResult) -> list[list]:
    rep = result.config["report"]
    rows = []
    for seed in result.seeds:
        base = result.stages.get(f"s{seed}/b0")
        for sid in result.setups:
            st = result.stages.get(f"s{seed}/{sid}")
            if st is None:
                continue
            modeled = st["grad_flops"] / rep["flops_per_second"]
            seconds = modeled if rep["timing"] == "modeled" else st["seconds"]
            if base is None:
                ratio = ""
            else:
                base_s = base["grad_flops"] / rep["flops_per_second"] if rep["timing"] == "modeled" else base["seconds"]
                ratio = f"{seconds / base_s:.2f}" if base_s > 0 else ""
            rows.append(
                [sid, seed, st["theta_c"], st["epochs"], st["grad_flops"], f"{seconds:.4f}", f"{st['seconds']:.4f}", ratio]
            )
    return rows


def emit_report(result: SweepResult, out_dir=None) -> dict[str, Path]:
    """Write summary, Fisher, likelihood, timing and curve tables plus reconstruction grids."""
    if not result.cells:
        raise ValueError("the sweep has no completed cells")
    out = Path(out_dir) if out_dir is not None else result.config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    paths: dict[str, Path] = {}

    order = {sid: i for i, sid in enumerate(result.setups)}
    cells = sorted(result.cells, key=lambda c: (c["seed"], order[c["setup"]], c["epoch"]))
    paths["summary.csv"] = out / "summary.csv"
    paths["summary.csv"].write_text(summary_csv([_report(c) for c in cells]))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        curves = sweep_freeze(result)
        tol = cfg["report"]["tolerance"]
        comparisons = []
        if "b0" in curves:
            for sid in curves:
                if sid != "b0":
                    comparisons.append(matched_accuracy_compare(result, "b0", sid, tol).to_dict())
        if result.control:
            c = result.control
            comparisons.append(
                matched_accuracy_compare(result, c["matched_setup"], c["first_setup"], tol).to_dict()
            )
    paths["curves.csv"] = out / "curves.csv"
    paths["curves.csv"].write_text(curves_csv(curves))

    aggregates = {}
    for sid in result.setups:
        for epoch in sorted({c["epoch"] for c in result.setup_cells(sid)}):
            group = [_report(c) for c in result.setup_cells(sid) if c["epoch"] == epoch]
            aggregates[f"{sid}/ep{epoch:04d}"] = aggregate_runs(group)
    summary = {
        "columns": SUMMARY_COLUMNS,
        "rows": [c["report"] for c in cells],
        "aggregates": aggregates,
        "comparisons": comparisons,
        "control": result.control,
        "failures": [{"id": f["id"], "error": f.get("error", "")} for f in result.failures],
        "timing_mode": cfg["report"]["timing"],
    }
    paths["summary.json"] = out / "summary.json"
    paths["summary.json"].write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")

    paths["fi_layers.csv"] = out / "fi_layers.csv"
    paths["fi_layers.csv"].write_text(_fisher_csv(result))
    paths["likelihoods.csv"] = out / "likelihoods.csv"
    paths["likelihoods.csv"].write_text(_likelihood_csv(result))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    w.writerows(_timing_rows(result))
    paths["timing.csv"] = out / "timing.csv"
    paths["timing.csv"].write_text(buf.getvalue())

    shape = None
    if cfg["report"]["grid"]:
        from .pipeline import Lab

        shape = Lab(cfg).source().shape
    if shape is not None:
        last = max(c["epoch"] for c in result.cells)
        per_class = cfg["attack"]["attacks_per_class"]
        for c in cells:
            if c["epoch"] != last:
                continue
            recon = np.load(cfg.out_dir / "cells" / c["reconstructions"])
            grid = image_grid(recon, shape[0], shape[1], cols=per_class)
            name = f"grid_s{c['seed']}_{c['setup']}.pgm"
            paths[name] = write_pgm(out / "grids" / name, grid)
    return paths


def _report(cell: dict):
    from ..metrics import EvalReport

    return EvalReport(**cell["report"])
