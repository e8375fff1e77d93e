"""Evaluation quantities: accuracy, attack accuracy, feature distances, the robustness ratio."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attack import AttackRun
from .data import ConsistencyError, LabeledSet
from .models import ModelGraph, logits_of, penultimate_features

__all__ = [
    "UndefinedRatioError",
    "EvalReport",
    "AttackAccuracy",
    "SUMMARY_COLUMNS",
    "natural_accuracy",
    "attack_accuracy",
    "knn_distance",
    "feature_distance_delta",
    "robustness_delta",
    "aggregate_runs",
    "summary_csv",
]

SUMMARY_COLUMNS = [
    "setup_id",
    "seed",
    "theta_c",
    "natural_acc",
    "att_top1",
    "att_top1_std",
    "att_top5",
    "knn_dist",
    "delta_eval",
    "l2_centroid",
    "train_seconds",
]


class UndefinedRatioError(ValueError):
    """The defended model is at least as accurate as the baseline, so the ratio is undefined."""


@dataclass
class EvalReport:
    setup_id: str
    seed: int
    theta_c: int
    natural_acc: float
    att_top1: float
    att_top1_std: float
    att_top5: float
    knn_dist: float
    delta_eval: float
    l2_centroid: float
    train_seconds: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("natural_acc", "att_top1", "att_top5"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if self.att_top5 < self.att_top1:
            raise ValueError("top-5 attack accuracy below top-1")
        if self.knn_dist < 0:
            raise ValueError("negative KNN distance")

    def row(self) -> list:
        return [getattr(self, c) for c in SUMMARY_COLUMNS]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class AttackAccuracy:
    top1: float
    top5: float
    top1_std: float  # spread of per-class success rates
    per_class: dict[int, float]

    def __iter__(self):
        return iter((self.top1, self.top5, self.per_class))


def natural_accuracy(model: ModelGraph, data: LabeledSet) -> float:
    if len(data) == 0:
        raise ValueError("empty labeled set")
    pred = logits_of(model, data.images).argmax(axis=1)
    return 100.0 * float(np.mean(pred == data.labels))


def _run_arrays(run_or_x, classes) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(run_or_x, AttackRun):
        return run_or_x.reconstructions, run_or_x.classes
    if classes is None:
        raise ValueError("classes are required when passing raw reconstructions")
    return np.asarray(run_or_x, dtype=np.float32), np.asarray(classes, dtype=np.int64)


def attack_accuracy(eval_model: ModelGraph, run, classes=None) -> AttackAccuracy:
    """Share of reconstructions the eval model assigns to the attacked class.

    Top-5 counts a hit when the class is among the five largest logits,
    so it is 100 whenever the model has five classes or fewer.
    """
    x, cls = _run_arrays(run, classes)
    if len(cls) == 0:
        raise ValueError("no reconstructions")
    k = eval_model.output_dim
    if cls.min() < 0 or cls.max() >= k:
        raise ConsistencyError(f"attacked classes exceed the eval model's {k} outputs")
    z = logits_of(eval_model, x)
    hit1 = z.argmax(axis=1) == cls
    # rank of the attacked class: number of logits strictly larger
    rank = (z > z[np.arange(len(cls)), cls][:, None]).sum(axis=1)
    hit5 = rank < 5
    per_class = {int(c): 100.0 * float(hit1[cls == c].mean()) for c in np.unique(cls)}
    rates = np.array(list(per_class.values()))
    return AttackAccuracy(
        top1=100.0 * float(hit1.mean()),
        top5=100.0 * float(hit5.mean()),
        top1_std=float(rates.std()),
        per_class=per_class,
    )


def _features(eval_model: ModelGraph, x: np.ndarray) -> np.ndarray:
    return penultimate_features(eval_model, x).data.astype(np.float64)


def _class_distances(eval_model, x, cls, priv: LabeledSet):
    """Yield (row index, distances to the private images of its class, centroid distance)."""
    missing = sorted(set(cls.tolist()) - set(priv.class_ids))
    if missing:
        raise ConsistencyError(f"attacked classes {missing} absent from the private set")
    fx = _features(eval_model, x)
    out = []
    for c in np.unique(cls):
        fp = _features(eval_model, priv.of_class(int(c)))
        centre = fp.mean(axis=0)
        for i in np.flatnonzero(cls == c):
            d = np.sqrt(((fp - fx[i]) ** 2).sum(axis=1))
            out.append((i, d, float(np.sqrt(((fx[i] - centre) ** 2).sum()))))
    out.sort(key=lambda t: t[0])
    return out


def knn_distance(eval_model: ModelGraph, reconstructions, priv: LabeledSet, classes=None) -> float:
    """Mean over reconstructions of the nearest same-class private feature distance."""
    x, cls = _run_arrays(reconstructions, classes)
    return float(np.mean([d.min() for _, d, _ in _class_distances(eval_model, x, cls, priv)]))


def feature_distance_delta(
    eval_model: ModelGraph, reconstructions, priv: LabeledSet, classes=None
) -> tuple[float, float]:
    """(mean squared nearest-neighbour distance, mean distance to the class centroid)."""
    x, cls = _run_arrays(reconstructions, classes)
    rows = _class_distances(eval_model, x, cls, priv)
    delta = float(np.mean([d.min() ** 2 for _, d, _ in rows]))
    centroid = float(np.mean([c for _, _, c in rows]))
    return delta, centroid


def robustness_delta(acc_nodef: float, att_nodef: float, acc_def: float, att_def: float) -> float:
    """Drop in attack accuracy per point of natural accuracy lost."""
    if acc_nodef <= acc_def:
        raise UndefinedRatioError("defense improved utility; delta undefined")
    return (att_nodef - att_def) / (acc_nodef - acc_def)


_NUMERIC = [c for c in SUMMARY_COLUMNS if c not in ("setup_id", "seed")]


def _metric_dict(report) -> dict:
    if isinstance(report, EvalReport):
        return {k: getattr(report, k) for k in _NUMERIC}
    return dict(report)


def aggregate_runs(reports) -> dict:
    """Mean and sample standard deviation (n - 1) for every numeric metric.

    Accepts EvalReports or plain mappings with identical keys. A single
    report yields std 0 and sets ``single_run``.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    rows = [_metric_dict(r) for r in reports]
    keys = list(rows[0])
    if any(list(r) != keys for r in rows[1:]):
        raise ConsistencyError("reports do not share the same metrics")
    out = {"n": len(rows), "single_run": len(rows) == 1}
    for k in keys:
        v = np.array([float(r[k]) for r in rows])
        out[k] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0}
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def summary_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for r in reports:
        writer.writerow([_fmt(v) for v in r.row()])
    return buf.getvalue()


assert [f.name for f in fields(EvalReport)][: len(SUMMARY_COLUMNS)] == SUMMARY_COLUMNS
