"""Measured properties of the MNIST desk fixture beyond the acceptance criteria."""

import csv
import io
import json

import numpy as np
import pytest

from invlab.fisher import FisherReport
from invlab.metrics import natural_accuracy

pytestmark = pytest.mark.slow

FINAL = 150


def fisher_reports(cfg, seed, setup):
    doc = json.loads((cfg.out_dir / f"seed{seed}" / setup / "fisher.json").read_text())
    assert doc["status"] == "done"
    return [FisherReport(**r) for r in doc["reports"]]


def test_every_grid_cell_appears_once(desk):
    cfg, lab, result = desk
    cells = json.loads((cfg.out_dir / "manifest.json").read_text())["cells"]
    expected = len(cfg["seeds"]) * len(lab.setups()) * len(lab.cell_epochs())
    assert len(cells) == expected == len(result.cells)


def test_prior_beats_the_mean_predictor(desk):
    cfg, _, _ = desk
    for seed in cfg["seeds"]:
        rec = json.loads((cfg.out_dir / f"seed{seed}" / "prior.json").read_text())
        assert rec["recon_mse"] < rec["mean_predictor_mse"]


def test_training_loss_falls(desk):
    cfg, lab, _ = desk
    for seed in cfg["seeds"]:
        stages = [cfg.out_dir / f"seed{seed}" / f"{name}.json" for name in ("pretrain", "prior", "eval")]
        stages += [cfg.out_dir / f"seed{seed}" / s.id / "finetune.json" for s in lab.setups()]
        for path in stages:
            losses = json.loads(path.read_text())["epoch_losses"]
            assert losses[-1] < losses[0], path


def test_eval_model_at_least_as_accurate_as_targets(desk):
    cfg, lab, result = desk
    for seed in cfg["seeds"]:
        ev = natural_accuracy(lab.eval_model(seed), lab.bundle(seed).priv_val)
        assert all(ev >= c["report"]["natural_acc"] for c in result.cells if c["seed"] == seed)


def test_classification_fisher_peaks_at_the_head(desk):
    # measured on the fully fine-tuned model; frozen prefixes keep large FI of their own
    cfg, _, _ = desk
    for seed in cfg["seeds"]:
        cls = next(r for r in fisher_reports(cfg, seed, "b0") if r.task == "classification")
        assert cls.layer_fi[-1] > cls.layer_fi[0]


def test_mi_fisher_favours_early_layers_for_both_distances(desk):
    cfg, lab, _ = desk
    k = 2  # ceil(L / 3) for L = 4
    for seed in cfg["seeds"]:
        mi = [r for r in fisher_reports(cfg, seed, "b0") if r.task == "mi"]
        assert {r.distance for r in mi} == {"l2", "l1"}
        assert all(r.head_mean(k) > r.tail_mean(k) for r in mi)


def test_early_layer_dominance_after_first_tenth_of_iterations(desk):
    cfg, lab, _ = desk
    start = cfg["attack"]["iterations"] // 10
    for seed in cfg["seeds"]:
        for setup in lab.setups():
            l2 = [r for r in fisher_reports(cfg, seed, setup.id) if r.task == "mi" and r.distance == "l2"]
            late = [r for r in l2 if r.iteration >= start]
            assert late and all(r.head_mean(2) > r.tail_mean(2) for r in late)


def test_frozen_runs_never_spend_more_gradient_flops(desk):
    cfg, _, _ = desk
    rows = list(csv.DictReader(io.StringIO((cfg.out_dir / "timing.csv").read_text())))
    for seed in cfg["seeds"]:
        mine = {r["setup_id"]: r for r in rows if r["seed"] == str(seed)}
        assert mine["b0"]["ratio"] == "1.00"
        for sid, r in mine.items():
            assert int(r["grad_flops"]) <= int(mine["b0"]["grad_flops"])


def test_larger_boundary_curve_lies_below(desk):
    from invlab.lab.report import sweep_freeze

    _, _, result = desk
    curves = sweep_freeze(result, setups=[0, 2])
    final = {sid: np.mean([p.att_top1 for p in pts if p.epoch == FINAL]) for sid, pts in curves.items()}
    assert final["b2"] < final["b0"]
