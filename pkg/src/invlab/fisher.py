"""Per-layer Fisher Information for the classification and inversion tasks.

The estimator is the diagonal empirical Fisher: for every parameter, the
mean over samples of the squared per-sample loss gradient. Layer values
pool weights and bias and take the unweighted mean.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attack import AttackConfig, AttackRun, attack_campaign
from .data import ConsistencyError, LabeledSet
from .models import GeneratorGraph, ModelGraph
from .tensor import (
    NumericError,
    Tape,
    Tensor,
    cross_entropy_rows,
    forward_layers,
    mean_rows,
    row_l1_norm,
    row_l2_norm,
    sub,
    total,
)
from .train import ConfigError

__all__ = [
    "FisherReport",
    "empirical_fisher",
    "layer_means",
    "fisher_classification",
    "fisher_mi",
    "fisher_across_iterations",
    "layer_importance_report",
    "FI_COLUMNS",
]

FI_COLUMNS = ["layer_index", "task", "distance", "iteration", "mean_fi", "normalized"]
DISTANCES = ("l2", "l1")


@dataclass
class FisherReport:
    task: str  # "classification" or "mi"
    layer_fi: list[float]
    n_samples: int
    distance: str | None = None
    iteration: int | None = None
    model_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("classification", "mi"):
            raise ValueError(f"unknown task {self.task!r}")
        if any(v < 0 for v in self.layer_fi):
            raise ValueError("Fisher values must be non-negative")

    def __len__(self) -> int:
        return len(self.layer_fi)

    def head_mean(self, k: int) -> float:
        return float(np.mean(self.layer_fi[:k]))

    def tail_mean(self, k: int) -> float:
        return float(np.mean(self.layer_fi[-k:]))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def empirical_fisher(
    model: ModelGraph,
    loss_fn: Callable[[ModelGraph, object], Tensor],
    samples: Sequence,
) -> list[np.ndarray]:
    """Mean squared per-sample gradient for every parameter, in layer order.

    ``loss_fn(graph, sample)`` must build a scalar loss from ``graph``'s
    parameters; it is evaluated under a fresh tape for each sample. All
    parameters are differentiated, including ones frozen for training.
    """
    samples = list(samples)
    if not samples:
        raise ConfigError("Fisher estimation needs at least one sample")
    graph = model.clone()
    params = graph.params()
    for p in params:
        p.requires_grad = True
    acc = [np.zeros(p.shape, dtype=np.float64) for p in params]
    for i, sample in enumerate(samples):
        try:
            with Tape() as tape:
                loss = loss_fn(graph, sample)
            grads = tape.backward(loss)
        except NumericError as err:
            raise NumericError(f"sample {i}: {err}") from None
        for a, p in zip(acc, params):
            g = grads.of(p)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"sample {i}: non-finite gradient")
            a += g * g
    return [a / len(samples) for a in acc]


def layer_means(model: ModelGraph, per_param: list[np.ndarray]) -> list[float]:
    """Average FI over each layer's weights and bias together."""
    out = []
    for i, layer in enumerate(model.layers):
        w, b = per_param[2 * i], per_param[2 * i + 1]
        out.append(float((w.sum() + b.sum()) / layer.n_params))
    return out


def fisher_classification(model: ModelGraph, val: LabeledSet) -> FisherReport:
    """FI of the cross-entropy loss on held-out private data."""
    if len(val) == 0:
        raise ConfigError("validation set is empty")
    if max(val.class_ids) >= model.output_dim:
        raise ConsistencyError("model head does not cover the validation classes")

    def loss(graph, i):
        x = Tensor(val.images[i : i + 1])
        return total(cross_entropy_rows(forward_layers(graph.layers, x), [val.labels[i]]))

    fi = empirical_fisher(model, loss, range(len(val)))
    return FisherReport("classification", layer_means(model, fi), len(val), model_id=model.arch_id)


def _select(n: int, max_samples: int | None, seed: int) -> np.ndarray:
    if max_samples is None or max_samples >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=max_samples, replace=False))


def fisher_mi(
    model: ModelGraph,
    reconstructions,
    classes,
    priv: LabeledSet,
    distance: str = "l2",
    centroid_grad: bool = True,
    max_samples: int | None = None,
    seed: int = 0,
    iteration: int | None = None,
) -> FisherReport:
    """FI of the feature-distance loss between reconstructions and private centroids.

    The per-sample loss is the ``distance`` between the penultimate features
    of a reconstruction and the mean penultimate feature of the private
    training images of its class, both computed with ``model``. With
    ``centroid_grad`` the gradient also flows through the centroid; turning
    it off treats the centroid as a constant. ``max_samples`` draws a seeded
    subset of the reconstructions (default: all of them).
    """
    if distance not in DISTANCES:
        raise ValueError(f"distance must be one of {DISTANCES}")
    if isinstance(reconstructions, AttackRun):
        classes = reconstructions.classes if classes is None else classes
        reconstructions = reconstructions.reconstructions
    x_hat = np.asarray(reconstructions, dtype=np.float32)
    classes = np.asarray(classes, dtype=np.int64)
    if x_hat.ndim != 2 or len(x_hat) == 0:
        raise ConfigError("need a non-empty N x d batch of reconstructions")
    if len(classes) != len(x_hat):
        raise ConsistencyError("one class per reconstruction is required")
    missing = sorted(set(classes.tolist()) - set(priv.class_ids))
    if missing:
        raise ConsistencyError(f"attacked classes {missing} absent from the private set")
    if len(model.layers) < 2:
        raise ConsistencyError("the model has no penultimate layer")
    stop = len(model.layers) - 1
    norm = row_l2_norm if distance == "l2" else row_l1_norm
    members = {int(c): priv.of_class(int(c)) for c in np.unique(classes)}

    frozen_centroids = {}
    if not centroid_grad:
        for c, imgs in members.items():
            feats = forward_layers(model.layers, Tensor(imgs), stop=stop).data.astype(np.float64)
            frozen_centroids[c] = Tensor(feats.mean(axis=0, keepdims=True))

    def loss(graph, i):
        c = int(classes[i])
        phi = forward_layers(graph.layers, Tensor(x_hat[i : i + 1]), stop=stop)
        if centroid_grad:
            centre = mean_rows(forward_layers(graph.layers, Tensor(members[c]), stop=stop))
        else:
            centre = frozen_centroids[c]
        return total(norm(sub(phi, centre)))

    picked = _select(len(x_hat), max_samples, seed)
    fi = empirical_fisher(model, loss, picked.tolist())
    return FisherReport(
        "mi",
        layer_means(model, fi),
        len(picked),
        distance=distance,
        iteration=iteration,
        model_id=model.arch_id,
        meta={"centroid_grad": centroid_grad},
    )


def fisher_across_iterations(
    model: ModelGraph,
    generator: GeneratorGraph,
    cfg: AttackConfig,
    snapshots,
    priv: LabeledSet,
    classes=None,
    distance: str = "l2",
    centroid_grad: bool = True,
    max_samples: int | None = None,
) -> list[FisherReport]:
    """Run one campaign recording best-so-far reconstructions at each snapshot.

    Returns one MI report per snapshot iteration, in ascending order.
    """
    snapshots = [int(s) for s in snapshots]
    if not snapshots:
        raise ConfigError("snapshot list is empty")
    if snapshots != sorted(snapshots):
        raise ConfigError("snapshot iterations must be sorted ascending")
    if snapshots[-1] > cfg.iterations or snapshots[0] < 0:
        raise ConfigError(f"snapshots must lie in [0, {cfg.iterations}]")
    classes = priv.class_ids if classes is None else list(classes)
    run = attack_campaign(model, generator, classes, cfg, snapshots=snapshots)
    return [
        fisher_mi(
            model,
            run.snapshot(s),
            run.classes,
            priv,
            distance=distance,
            centroid_grad=centroid_grad,
            max_samples=max_samples,
            seed=cfg.seed,
            iteration=s,
        )
        for s in snapshots
    ]


def layer_importance_report(reports: Sequence[FisherReport]) -> str:
    """One CSV row per (report, layer); ``normalized`` divides by the report maximum."""
    reports = list(reports)
    if not reports:
        raise ConfigError("no reports to tabulate")
    ids = {(r.model_id, len(r)) for r in reports}
    if len(ids) != 1:
        raise ConsistencyError("reports come from different models")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FI_COLUMNS)
    for r in reports:
        peak = max(r.layer_fi)
        for i, v in enumerate(r.layer_fi):
            writer.writerow(
                [
                    i,
                    r.task,
                    r.distance or "",
                    "" if r.iteration is None else r.iteration,
                    f"{v:.6e}",
                    f"{(v / peak if peak > 0 else 0.0):.6f}",
                ]
            )
    return buf.getvalue()
