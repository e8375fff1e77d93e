"""The experiment grid: data, training stages, attack cells and Fisher reports.

Every stage writes its artifacts under the output directory together with
a small JSON record. A stage whose record already exists is loaded
instead of recomputed, which makes re-running a finished sweep free and
lets the CLI subcommands build on each other.
"""

from __future__ import annotations

import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..attack import AttackConfig, attack_campaign, likelihood_histogram
from ..data import DatasetBundle, LabeledSet, load_idx, mnist_subset, split_disjoint, synth_blobs
from ..fisher import FisherReport, fisher_classification, fisher_mi
from ..metrics import EvalReport, attack_accuracy, feature_distance_delta, knn_distance, natural_accuracy
from ..models import ModelGraph, build_classifier, build_decoder, eval_widths
from ..train import (
    TrainConfig,
    finetune_first_layers,
    finetune_stage2,
    load_checkpoint,
    pretrain_stage1,
    save_checkpoint,
    train_eval_model,
    train_prior_decoder,
)
from .config import ExperimentConfig

__all__ = ["Setup", "Lab", "SweepResult", "run_config", "downsample", "build_source"]

log = logging.getLogger("invlab.lab")


def downsample(images: np.ndarray, shape: tuple[int, int], factor: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Average non-overlapping ``factor`` x ``factor`` pixel blocks."""
    if factor == 1:
        return images, shape
    h, w = shape
    if h % factor or w % factor:
        raise ValueError(f"image shape {shape} is not divisible by {factor}")
    n = len(images)
    pooled = images.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return pooled.reshape(n, -1), (h // factor, w // factor)


def build_source(cfg: ExperimentConfig) -> LabeledSet:
    data = cfg["data"]
    if data["source"] == "blobs":
        return synth_blobs(**data["blobs"])
    if data["source"] == "mnist":
        x, y = mnist_subset()
        images, shape = x.reshape(len(x), -1).astype(np.float64) / 255.0, x.shape[1:]
    else:
        ds = load_idx(cfg.resolve(data["images"]), cfg.resolve(data["labels"]))
        images, shape, y = ds.images.astype(np.float64), ds.shape, ds.labels
    images, shape = downsample(images, tuple(shape), data["downsample"])
    return LabeledSet(images, y, shape)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, path)


def _read_json(path: Path):
    return json.loads(path.read_text())


@dataclass(frozen=True)
class Setup:
    """One fine-tuning recipe: freeze a prefix (``freeze``) or train the first layers (``first``)."""

    kind: str
    index: int
    head: str = "trainable"

    @property
    def id(self) -> str:
        return f"b{self.index}" if self.kind == "freeze" else f"first{self.index}"


def _theta_c_freeze(widths: list[int], boundary: int) -> int:
    return sum(a * b + b for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])) if i >= boundary)


def _theta_c_first(widths: list[int], k: int, head: str) -> int:
    sizes = [a * b + b for a, b in zip(widths[:-1], widths[1:])]
    return sum(sizes[:k]) + (sizes[-1] if head == "trainable" else 0)


@dataclass
class SweepResult:
    """Completed cells, failures and Fisher reports of one sweep."""

    config: ExperimentConfig
    cells: list[dict]
    failures: list[dict]
    fisher: list[dict]
    stages: dict
    control: dict | None = None
    manifest: dict = field(default_factory=dict)

    @property
    def reports(self) -> list[EvalReport]:
        return [EvalReport(**c["report"]) for c in self.cells]

    def setup_cells(self, setup_id: str, seed: int | None = None) -> list[dict]:
        return [c for c in self.cells if c["setup"] == setup_id and (seed is None or c["seed"] == seed)]

    @property
    def setups(self) -> list[str]:
        seen: list[str] = []
        for c in self.cells:
            if c["setup"] not in seen:
                seen.append(c["setup"])
        return seen

    @property
    def seeds(self) -> list[int]:
        return sorted({c["seed"] for c in self.cells})


class Lab:
    """Stage runner bound to one configuration and output directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = cfg.out_dir
        self._source: LabeledSet | None = None
        self._bundles: dict[int, DatasetBundle] = {}

    # -- data -------------------------------------------------------------

    def source(self) -> LabeledSet:
        if self._source is None:
            self._source = build_source(self.cfg)
        return self._source

    def bundle(self, seed: int) -> DatasetBundle:
        if seed not in self._bundles:
            s = self.cfg["split"]
            b = split_disjoint(
                self.source(), s["pretrain_classes"], s["pub_classes"], s["priv_classes"], s["val_fraction"], seed
            )
            path = self.out / f"seed{seed}" / "split.json"
            if not path.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(b.manifest_json())
            self._bundles[seed] = b
        return self._bundles[seed]

    # -- architecture -----------------------------------------------------

    @property
    def target_widths(self) -> list[int]:
        k = len(self.cfg["split"]["pretrain_classes"])
        return [self.source().dim, *self.cfg["target"]["hidden"], k]

    @property
    def finetune_widths(self) -> list[int]:
        return [*self.target_widths[:-1], len(self.cfg["split"]["priv_classes"])]

    def setups(self) -> list[Setup]:
        out = [Setup("freeze", b) for b in self.cfg["boundaries"]]
        control = self.control()
        if control:
            first = Setup("first", control["k_first"], control["head"])
            out.append(first)
            matched = Setup("freeze", control["matched_boundary"])
            if matched not in out:
                out.append(matched)
        return out

    def control(self) -> dict | None:
        c = self.cfg.control
        if c is None:
            return None
        widths = self.finetune_widths
        theta_first = _theta_c_first(widths, c["k_first"], c["head"])
        n_layers = len(widths) - 1
        # the freeze boundary whose trainable suffix best matches the first-layers run
        best = min(range(1, n_layers), key=lambda b: (abs(_theta_c_freeze(widths, b) - theta_first), b))
        return {
            **c,
            "first_setup": f"first{c['k_first']}",
            "matched_boundary": best,
            "matched_setup": f"b{best}",
            "theta_c_first": theta_first,
            "theta_c_matched": _theta_c_freeze(widths, best),
        }

    def _train_cfg(self, section: dict, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**section, "seed": seed})

    # -- stages -------------------------------------------------------------

    def _seed_dir(self, seed: int) -> Path:
        return self.out / f"seed{seed}"

    def pretrained(self, seed: int) -> ModelGraph:
        record = self._seed_dir(seed) / "pretrain.json"
        ckpt = self._seed_dir(seed) / "pretrain.ckpt"
        if not record.exists():
            b = self.bundle(seed)
            graph = build_classifier(self.target_widths, seed, hidden_activation=self.cfg["target"]["activation"])
            res = pretrain_stage1(graph, b.pretrain, self._train_cfg(self.cfg["train_pretrain"], seed))
            final = res.checkpoints[max(res.checkpoints)]
            save_checkpoint(final.to_graph(), final.meta, ckpt)
            _write_json(
                record,
                {
                    "stage": "pretrain",
                    "epoch_losses": res.epoch_losses,
                    "grad_flops": res.grad_flops,
                    "seconds": res.seconds,
                    "train_acc": natural_accuracy(res.graph, b.pretrain),
                },
            )
        return load_checkpoint(ckpt)[0]

    def generator(self, seed: int) -> ModelGraph:
        record = self._seed_dir(seed) / "prior.json"
        ckpt = self._seed_dir(seed) / "prior.ckpt"
        if not record.exists():
            b = self.bundle(seed)
            g = self.cfg["generator"]
            dec = build_decoder(g["latent_dim"], g["hidden"], b.pub.dim, seed)
            res, encoder = train_prior_decoder(
                dec, b.pub, self._train_cfg(g["train"], seed), latent_penalty=g["latent_penalty"]
            )
            final = res.checkpoints[max(res.checkpoints)]
            save_checkpoint(final.to_graph(), final.meta, ckpt)
            recon = res.graph.forward(encoder.forward(b.pub.images)).data.astype(np.float64)
            mse = float(((recon - b.pub.images) ** 2).mean())
            baseline = float(((b.pub.images - b.pub.images.mean(axis=0)) ** 2).mean())
            _write_json(
                record,
                {
                    "stage": "prior",
                    "epoch_losses": res.epoch_losses,
                    "grad_flops": res.grad_flops,
                    "seconds": res.seconds,
                    "recon_mse": mse,
                    "mean_predictor_mse": baseline,
                },
            )
        return load_checkpoint(ckpt)[0]

    def eval_model(self, seed: int) -> ModelGraph:
        record = self._seed_dir(seed) / "eval.json"
        ckpt = self._seed_dir(seed) / "eval.ckpt"
        if not record.exists():
            b = self.bundle(seed)
            e = self.cfg["eval"]
            target = self.finetune_widths
            widths = [target[0], *e["hidden"], target[-1]] if e["hidden"] else eval_widths(target)
            target_id = "mlp-" + "-".join(map(str, target))
            res = train_eval_model(
                b.priv_full, widths, self._train_cfg(e["train"], seed + e["seed_offset"]), target_arch_id=target_id
            )
            final = res.checkpoints[max(res.checkpoints)]
            save_checkpoint(final.to_graph(), final.meta, ckpt)
            _write_json(
                record,
                {
                    "stage": "eval",
                    "epoch_losses": res.epoch_losses,
                    "grad_flops": res.grad_flops,
                    "seconds": res.seconds,
                    "train_acc": natural_accuracy(res.graph, b.priv_full),
                },
            )
        return load_checkpoint(ckpt)[0]

    def finetuned(self, seed: int, setup: Setup) -> dict:
        """Run (or load) a fine-tuning setup; returns its record with checkpoint paths."""
        base = self._seed_dir(seed) / setup.id
        record = base / "finetune.json"
        if record.exists():
            return _read_json(record)
        pre = self.pretrained(seed)
        b = self.bundle(seed)
        tcfg = self._train_cfg(self.cfg["train_finetune"], seed)
        if setup.kind == "freeze":
            res = finetune_stage2(pre, setup.index, b.priv, tcfg)
        else:
            res = finetune_first_layers(pre, setup.index, b.priv, tcfg, head=setup.head)
        paths = {}
        for epoch, ck in sorted(res.checkpoints.items()):
            path = base / f"ep{epoch:04d}.ckpt"
            save_checkpoint(ck.to_graph(), ck.meta, path)
            paths[str(epoch)] = str(path.relative_to(self.out))
        rec = {
            "stage": "finetune",
            "setup": setup.id,
            "kind": setup.kind,
            "index": setup.index,
            "head": setup.head,
            "theta_c": res.trainable,
            "epochs": tcfg.epochs,
            "epoch_losses": res.epoch_losses,
            "epoch_flops": res.epoch_flops,
            "epoch_seconds": res.epoch_seconds,
            "grad_flops": res.grad_flops,
            "seconds": res.seconds,
            "checkpoints": paths,
        }
        _write_json(record, rec)
        return rec

    def checkpoint(self, seed: int, setup: Setup, epoch: int | None = None) -> ModelGraph:
        rec = self.finetuned(seed, setup)
        key = str(epoch if epoch is not None else max(int(e) for e in rec["checkpoints"]))
        if key not in rec["checkpoints"]:
            raise KeyError(f"no checkpoint at epoch {key} for {setup.id}")
        return load_checkpoint(self.out / rec["checkpoints"][key])[0]

    # -- attacks and metrics --------------------------------------------------

    def attack_config(self, seed: int) -> AttackConfig:
        a = {k: v for k, v in self.cfg["attack"].items() if k != "classes"}
        return AttackConfig(**a, seed=seed, image_shape=self.source().shape)

    def attack_classes(self) -> list[int]:
        priv = sorted(self.cfg["split"]["priv_classes"])
        wanted = self.cfg["attack"]["classes"]
        if wanted is None:
            return list(range(len(priv)))
        missing = sorted(set(wanted) - set(priv))
        if missing:
            raise ValueError(f"attack classes {missing} are not private classes")
        return [priv.index(c) for c in wanted]

    def _cell_path(self, seed: int, setup: Setup, epoch: int) -> Path:
        return self.out / "cells" / f"s{seed}_{setup.id}_ep{epoch:04d}.json"

    def cell_epochs(self) -> list[int]:
        t = self.cfg["train_finetune"]
        return sorted({e for e in t["checkpoint_epochs"] if e <= t["epochs"]} | {t["epochs"]})

    def run_cell(self, seed: int, setup: Setup, epoch: int) -> dict:
        path = self._cell_path(seed, setup, epoch)
        if path.exists():
            cached = _read_json(path)
            if cached.get("status") == "done":
                return cached
        cell_id = f"s{seed}/{setup.id}/ep{epoch}"
        try:
            rec = self.finetuned(seed, setup)
            target = self.checkpoint(seed, setup, epoch)
            gen, ev, b = self.generator(seed), self.eval_model(seed), self.bundle(seed)
            run = attack_campaign(
                target, gen, self.attack_classes(), self.attack_config(seed), target_id=cell_id, generator_id=f"prior/s{seed}"
            )
            acc = attack_accuracy(ev, run)
            knn = knn_distance(ev, run, b.priv)
            delta, centroid = feature_distance_delta(ev, run, b.priv)
            rep = self.cfg["report"]
            if rep["timing"] == "modeled":
                seconds = rec["epoch_flops"][epoch - 1] / rep["flops_per_second"]
            else:
                seconds = rec["epoch_seconds"][epoch - 1]
            report = EvalReport(
                setup_id=f"{setup.id}/ep{epoch:04d}",
                seed=seed,
                theta_c=rec["theta_c"],
                natural_acc=natural_accuracy(target, b.priv_val),
                att_top1=acc.top1,
                att_top1_std=acc.top1_std,
                att_top5=acc.top5,
                knn_dist=knn,
                delta_eval=delta,
                l2_centroid=centroid,
                train_seconds=seconds,
            )
            recon_path = path.with_suffix(".npy")
            recon_path.parent.mkdir(parents=True, exist_ok=True)
            np.save(recon_path, run.reconstructions)
            if epoch == max(self.cell_epochs()):
                (path.parent / f"s{seed}_{setup.id}_ep{epoch:04d}.run.json").write_text(run.to_json())
            cell = {
                "status": "done",
                "id": cell_id,
                "seed": seed,
                "setup": setup.id,
                "epoch": epoch,
                "report": {k: v for k, v in report.__dict__.items() if k != "meta"},
                "per_class": {str(k): v for k, v in acc.per_class.items()},
                "likelihoods": likelihood_histogram(run, target, ev),
                "objectives": [[e.initial_objective, e.final_objective] for e in run.entries],
                "reconstructions": recon_path.name,
            }
        except Exception as err:  # a failed cell is recorded, never fatal
            log.warning("cell %s failed: %s", cell_id, err)
            cell = {
                "status": "failed",
                "id": cell_id,
                "seed": seed,
                "setup": setup.id,
                "epoch": epoch,
                "error": f"{type(err).__name__}: {err}",
                "traceback": traceback.format_exc(limit=4),
            }
        _write_json(path, cell)
        return cell

    def fisher(self, seed: int, setup: Setup) -> dict:
        """Classification and MI Fisher reports on the final checkpoint of a setup."""
        path = self._seed_dir(seed) / setup.id / "fisher.json"
        if path.exists():
            cached = _read_json(path)
            if cached.get("status") == "done":
                return cached
        f = self.cfg["fisher"]
        try:
            target = self.checkpoint(seed, setup)
            b = self.bundle(seed)
            cfg = self.attack_config(seed)
            snaps = sorted(set(f["snapshots"]) | {cfg.iterations})
            run = attack_campaign(target, self.generator(seed), self.attack_classes(), cfg, snapshots=snaps)
            reports = [fisher_classification(target, b.priv_val)]
            for dist in f["distances"]:
                its = snaps if dist == f["distances"][0] else [cfg.iterations]
                for it in its:
                    reports.append(
                        fisher_mi(
                            target,
                            run.snapshot(it),
                            run.classes,
                            b.priv,
                            distance=dist,
                            centroid_grad=f["centroid_grad"],
                            max_samples=f["max_samples"],
                            seed=seed,
                            iteration=it,
                        )
                    )
            out = {
                "status": "done",
                "seed": seed,
                "setup": setup.id,
                "reports": [json.loads(r.to_json()) for r in reports],
            }
        except Exception as err:
            log.warning("fisher %s/%s failed: %s", seed, setup.id, err)
            out = {"status": "failed", "seed": seed, "setup": setup.id, "error": f"{type(err).__name__}: {err}"}
        _write_json(path, out)
        return out

    # -- whole grid ------------------------------------------------------------

    def run_seed(self, seed: int) -> None:
        for setup in self.setups():
            for epoch in self.cell_epochs():
                self.run_cell(seed, setup, epoch)
            if self.cfg["fisher"]["enabled"]:
                self.fisher(seed, setup)

    def collect(self) -> SweepResult:
        cells, failures, fishers = [], [], []
        manifest_cells = {}
        for seed in self.cfg["seeds"]:
            for setup in self.setups():
                for epoch in self.cell_epochs():
                    path = self._cell_path(seed, setup, epoch)
                    if path.exists():
                        cell = _read_json(path)
                    else:
                        cell = {"status": "failed", "id": f"s{seed}/{setup.id}/ep{epoch}", "seed": seed,
                                "setup": setup.id, "epoch": epoch, "error": "cell never ran"}
                    (cells if cell["status"] == "done" else failures).append(cell)
                    manifest_cells[cell["id"]] = {
                        "status": cell["status"],
                        "path": str(path.relative_to(self.out)),
                        **({"error": cell["error"]} if cell["status"] != "done" else {}),
                    }
                fpath = self._seed_dir(seed) / setup.id / "fisher.json"
                if self.cfg["fisher"]["enabled"] and fpath.exists():
                    fishers.append(_read_json(fpath))
        stages = {}
        for seed in self.cfg["seeds"]:
            d = self._seed_dir(seed)
            for name in ("pretrain", "prior", "eval"):
                if (d / f"{name}.json").exists():
                    stages[f"s{seed}/{name}"] = _read_json(d / f"{name}.json")
            for setup in self.setups():
                p = d / setup.id / "finetune.json"
                if p.exists():
                    stages[f"s{seed}/{setup.id}"] = _read_json(p)
        manifest = {
            "config": self.cfg.raw,
            "cells": manifest_cells,
            "checkpoint_epochs": self.cell_epochs(),
            "setups": [s.id for s in self.setups()],
            "control": self.control(),
            "fisher": {f"s{f['seed']}/{f['setup']}": f["status"] for f in fishers},
        }
        _write_json(self.out / "manifest.json", manifest)
        return SweepResult(self.cfg, cells, failures, fishers, stages, self.control(), manifest)


def _run_seed_job(args) -> None:
    cfg, seed = args
    Lab(cfg).run_seed(seed)


def run_config(cfg, workers: int = 1) -> SweepResult:
    """Execute the whole boundary x seed x checkpoint grid and collect it."""
    from .config import load_config

    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    lab = Lab(cfg)
    lab.out.mkdir(parents=True, exist_ok=True)
    (lab.out / "config.json").write_text(cfg.to_json())
    seeds = list(cfg["seeds"])
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            list(pool.map(_run_seed_job, [(cfg, s) for s in seeds]))
    else:
        for s in seeds:
            lab.run_seed(s)
    return lab.collect()
