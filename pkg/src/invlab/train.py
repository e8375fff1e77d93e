"""Two-stage classifier training, decoder-prior training and checkpoint I/O."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledSet
from .models import (
    GeneratorGraph,
    Layer,
    ModelGraph,
    _he_layer,
    build_classifier,
    build_encoder,
    logits_of,
    partition_freeze,
)
from .tensor import (
    Tape,
    Tensor,
    cross_entropy_rows,
    forward_layers,
    mean,
    row_sum,
    square,
    sub,
    add,
    scale,
)

__all__ = [
    "ConfigError",
    "CheckpointFormatError",
    "TrainConfig",
    "Checkpoint",
    "TrainResult",
    "SGD",
    "DEFAULT_CHECKPOINT_EPOCHS",
    "pretrain_stage1",
    "finetune_stage2",
    "finetune_first_layers",
    "train_prior_decoder",
    "train_eval_model",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "accuracy",
]

DEFAULT_CHECKPOINT_EPOCHS = [1, 2, 5, 10, 20, 50, 100, 200]

MAGIC = b"TLDM"
VERSION = 1
STAGES = ("pretrain", "finetune", "prior", "eval")


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_epochs: list[int] = field(default_factory=lambda: list(DEFAULT_CHECKPOINT_EPOCHS))

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    meta: dict
    params: list[np.ndarray]

    def to_graph(self) -> ModelGraph:
        return _graph_from(self.meta, self.params)


@dataclass
class TrainResult:
    graph: ModelGraph
    checkpoints: dict[int, Checkpoint]
    epoch_losses: list[float]
    grad_flops: int
    seconds: float
    trainable: int = 0
    epoch_flops: list[int] = field(default_factory=list)  # cumulative after each epoch
    epoch_seconds: list[float] = field(default_factory=list)


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + (g + weight_decay * theta)``; ``theta <- theta - lr * v``.
    Only parameters that currently require gradients are touched, so frozen
    layers never acquire optimizer state.
    """

    def __init__(self, graph: ModelGraph, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.graph = graph
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self, grads) -> None:
        for i, layer in enumerate(self.graph.layers):
            for name in ("weight", "bias"):
                p = getattr(layer, name)
                if not p.requires_grad:
                    continue
                g = grads.get(p)
                if g is None:
                    continue
                theta = p.data.astype(np.float64)
                d = g.astype(np.float64) + self.weight_decay * theta
                v = self.velocity.get((i, name))
                v = d if v is None else self.momentum * v + d
                self.velocity[(i, name)] = v
                setattr(layer, name, Tensor((theta - self.lr * v).astype(np.float32), requires_grad=True))


def _snapshot(graph: ModelGraph, meta: dict) -> Checkpoint:
    return Checkpoint(dict(meta), [p.data.copy() for p in graph.params()])


def _meta(graph: ModelGraph, stage: str, epoch: int, seed: int, fingerprint: str, **extra) -> dict:
    return {
        "arch_id": graph.arch_id,
        "layer_dims": graph.widths,
        "activations": [l.activation for l in graph.layers],
        "freeze_boundary": int(graph.boundary),
        "stage": stage,
        "epoch": int(epoch),
        "seed": int(seed),
        "dataset": fingerprint,
        "kind": "generator" if isinstance(graph, GeneratorGraph) else "classifier",
        **extra,
    }


def _grad_flops_per_sample(graph: ModelGraph) -> int:
    """Multiply-adds (x2) spent on gradients for one sample, frozen layers excluded."""
    trainable = [i for i, l in enumerate(graph.layers) if l.trainable]
    if not trainable:
        return 0
    first = trainable[0]
    flops = 0
    for i, layer in enumerate(graph.layers):
        if i < first:
            continue
        macs = layer.fan_in * layer.fan_out
        if layer.trainable:
            flops += 2 * macs + layer.fan_out
        if i > first:
            flops += 2 * macs
    return flops


def _fit(graph, batch_loss, n: int, cfg: TrainConfig, meta_fn, extra_graphs=()) -> TrainResult:
    """Minibatch SGD over ``n`` samples; ``batch_loss(idx)`` builds a scalar loss."""
    models = [graph, *extra_graphs]
    opts = [SGD(m, cfg.learning_rate, cfg.momentum, cfg.weight_decay) for m in models]
    checkpoints: dict[int, Checkpoint] = {}
    losses: list[float] = []
    flops = 0
    epoch_flops: list[int] = []
    epoch_seconds: list[float] = []
    per_sample = sum(_grad_flops_per_sample(m) for m in models)
    n_trainable = sum(p.size for m in models for p in m.trainable_params())
    start = time.perf_counter()
    wanted = set(cfg.checkpoint_epochs)
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            tape = Tape()
            with tape:
                loss = batch_loss(idx)
            total_loss += float(loss.data) * len(idx)
            if n_trainable:
                grads = tape.backward(loss)
                for opt in opts:
                    opt.step(grads)
                flops += per_sample * len(idx) + 4 * n_trainable
        losses.append(total_loss / n)
        epoch_flops.append(flops)
        epoch_seconds.append(time.perf_counter() - start)
        if epoch in wanted:
            checkpoints[epoch] = _snapshot(graph, meta_fn(epoch))
    seconds = time.perf_counter() - start
    if cfg.epochs not in checkpoints:
        checkpoints[cfg.epochs] = _snapshot(graph, meta_fn(cfg.epochs))
    return TrainResult(graph, checkpoints, losses, flops, seconds, n_trainable, epoch_flops, epoch_seconds)


def _classification_loss(graph: ModelGraph, data: LabeledSet):
    def batch_loss(idx):
        logits = forward_layers(graph.layers, Tensor(data.images[idx]))
        return mean(cross_entropy_rows(logits, data.labels[idx]))

    return batch_loss


def accuracy(graph: ModelGraph, data: LabeledSet) -> float:
    """Top-1 accuracy in percent."""
    pred = logits_of(graph, data.images).argmax(axis=1)
    return 100.0 * float((pred == data.labels).mean())


def pretrain_stage1(graph: ModelGraph, data: LabeledSet, cfg: TrainConfig) -> TrainResult:
    """Stage 1: every layer is trained on the pre-training split."""
    n_classes = len(data.class_ids)
    if graph.output_dim != n_classes:
        raise ConfigError(f"model has {graph.output_dim} outputs but data has {n_classes} classes")
    graph = graph.clone()
    partition_freeze(graph, 0)
    fp = data.fingerprint()
    return _fit(
        graph,
        _classification_loss(graph, data),
        len(data),
        cfg,
        lambda e: _meta(graph, "pretrain", e, cfg.seed, fp),
    )


def _fresh_head(graph: ModelGraph, n_classes: int, seed: int) -> None:
    head = graph.layers[-1]
    rng = np.random.default_rng([seed, 0x4EAD])
    graph.layers[-1] = _he_layer(rng, head.fan_in, n_classes, head.activation)


def _set_trainable(graph: ModelGraph, trainable: set[int]) -> int:
    count = 0
    for i, layer in enumerate(graph.layers):
        on = i in trainable
        for p in layer.params():
            p.requires_grad = on
        count += layer.n_params if on else 0
    return count


def finetune_stage2(
    pretrained: ModelGraph,
    boundary: int,
    data: LabeledSet,
    cfg: TrainConfig,
    reinit_head: bool | None = None,
) -> TrainResult:
    """Stage 2: freeze layers ``< boundary`` and train the rest on private data.

    The output head is re-initialised when the private class count differs
    from the model's (or when ``reinit_head`` forces it); a fresh head always
    belongs to the trainable part.
    """
    n_layers = len(pretrained.layers)
    n_classes = len(data.class_ids)
    if not 0 <= boundary <= n_layers:
        raise ConfigError(f"boundary {boundary} outside [0, {n_layers}]")
    graph = pretrained.clone()
    resize = graph.output_dim != n_classes
    if reinit_head is None:
        reinit_head = resize
    if reinit_head and boundary == n_layers:
        raise ConfigError("boundary = L leaves nothing trainable but the head must be re-initialised")
    if reinit_head:
        _fresh_head(graph, n_classes, cfg.seed)
    partition_freeze(graph, boundary)
    fp = data.fingerprint()
    return _fit(
        graph,
        _classification_loss(graph, data),
        len(data),
        cfg,
        lambda e: _meta(graph, "finetune", e, cfg.seed, fp),
    )


def finetune_first_layers(
    pretrained: ModelGraph,
    k_first: int,
    data: LabeledSet,
    cfg: TrainConfig,
    head: str = "trainable",
) -> TrainResult:
    """Control run: train layers ``< k_first`` (plus the head unless ``head='frozen'``).

    Everything between ``k_first`` and the head stays at its pre-trained value.
    """
    n_layers = len(pretrained.layers)
    if not 1 <= k_first < n_layers:
        raise ConfigError(f"k_first {k_first} outside [1, {n_layers - 1}]")
    if head not in ("trainable", "frozen"):
        raise ConfigError("head must be 'trainable' or 'frozen'")
    n_classes = len(data.class_ids)
    graph = pretrained.clone()
    if graph.output_dim != n_classes:
        if head == "frozen":
            raise ConfigError("a frozen head cannot serve a different class count")
        _fresh_head(graph, n_classes, cfg.seed)
    layers = set(range(k_first))
    if head == "trainable":
        layers.add(n_layers - 1)
    _set_trainable(graph, layers)
    graph.boundary = 0
    fp = data.fingerprint()
    return _fit(
        graph,
        _classification_loss(graph, data),
        len(data),
        cfg,
        lambda e: _meta(graph, "finetune", e, cfg.seed, fp, first_layers=k_first, head=head),
    )


def train_prior_decoder(
    decoder: GeneratorGraph,
    data: LabeledSet,
    cfg: TrainConfig,
    latent_penalty: float = 0.0,
    encoder: ModelGraph | None = None,
    encoder_hidden=None,
) -> tuple[TrainResult, ModelGraph]:
    """Fit a regularised autoencoder on public data; returns (decoder result, encoder).

    Per-sample loss: mean squared pixel error of ``decode(encode(x))`` plus
    ``latent_penalty * ||encode(x)||^2``.
    """
    if latent_penalty < 0:
        raise ConfigError("latent_penalty must be >= 0")
    decoder = decoder.clone()
    partition_freeze(decoder, 0)
    if encoder is None:
        hidden = list(encoder_hidden) if encoder_hidden is not None else [
            l.fan_out for l in reversed(decoder.layers[:-1])
        ]
        encoder = build_encoder(decoder.data_dim, hidden, decoder.latent_dim, cfg.seed + 1)
    else:
        encoder = encoder.clone()
    partition_freeze(encoder, 0)
    d_x = decoder.data_dim

    def batch_loss(idx):
        x = Tensor(data.images[idx])
        z = forward_layers(encoder.layers, x)
        recon = forward_layers(decoder.layers, z)
        per = scale(row_sum(square(sub(recon, x))), 1.0 / d_x)
        if latent_penalty:
            per = add(per, scale(row_sum(square(z)), latent_penalty))
        return mean(per)

    fp = data.fingerprint()
    result = _fit(
        decoder,
        batch_loss,
        len(data),
        cfg,
        lambda e: _meta(decoder, "prior", e, cfg.seed, fp, latent_penalty=latent_penalty),
        extra_graphs=(encoder,),
    )
    return result, encoder


def train_eval_model(
    data: LabeledSet,
    widths,
    cfg: TrainConfig,
    target_arch_id: str | None = None,
    arch_id: str | None = None,
) -> TrainResult:
    """Train the scoring classifier on all private data (train and validation)."""
    graph = build_classifier(widths, cfg.seed, arch_id=arch_id)
    if target_arch_id is not None and graph.arch_id == target_arch_id:
        raise ConfigError("the evaluation model must differ in architecture from the target")
    if graph.output_dim != len(data.class_ids):
        raise ConfigError("evaluation head does not match the private class count")
    fp = data.fingerprint()
    return _fit(
        graph,
        _classification_loss(graph, data),
        len(data),
        cfg,
        lambda e: _meta(graph, "eval", e, cfg.seed, fp),
    )


# -- checkpoint files ---------------------------------------------------------


def checkpoint_bytes(graph: ModelGraph, meta: dict) -> bytes:
    """Serialise: magic, version, u32 LE metadata length, JSON, f32 LE payload."""
    meta = {**meta, "layer_dims": graph.widths, "activations": [l.activation for l in graph.layers]}
    if meta.get("stage") not in STAGES:
        raise CheckpointFormatError(f"stage must be one of {STAGES}")
    meta["n_params"] = graph.n_params()
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(p.data.astype("<f4").tobytes() for p in graph.params())
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(blob)) + blob + payload


def save_checkpoint(graph: ModelGraph, meta: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(graph, meta))
    return path


def _graph_from(meta: dict, arrays: list[np.ndarray]) -> ModelGraph:
    dims = meta["layer_dims"]
    acts = meta["activations"]
    layers = [
        Layer(Tensor(arrays[2 * i], requires_grad=True), Tensor(arrays[2 * i + 1], requires_grad=True), acts[i])
        for i in range(len(dims) - 1)
    ]
    cls = GeneratorGraph if meta.get("kind") == "generator" else ModelGraph
    graph = cls(layers, meta["arch_id"])
    partition_freeze(graph, int(meta.get("freeze_boundary", 0)))
    return graph


def load_checkpoint(path) -> tuple[ModelGraph, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    if len(raw) < 9 or raw[4] != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {raw[4] if len(raw) > 4 else None}")
    (n_meta,) = struct.unpack("<I", raw[5:9])
    if len(raw) < 9 + n_meta:
        raise OSError("truncated checkpoint metadata")
    meta = json.loads(raw[9 : 9 + n_meta].decode("utf-8"))
    dims = meta["layer_dims"]
    shapes = []
    for a, b in zip(dims[:-1], dims[1:]):
        shapes += [(a, b), (b,)]
    expected = sum(int(np.prod(s)) for s in shapes)
    if meta.get("n_params") != expected:
        raise CheckpointFormatError("metadata parameter count disagrees with layer dims")
    payload = raw[9 + n_meta :]
    if len(payload) != 4 * expected:
        raise OSError(f"truncated checkpoint payload: {len(payload)} bytes, expected {4 * expected}")
    flat = np.frombuffer(payload, dtype="<f4")
    arrays, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[off : off + n].reshape(s).astype(np.float32))
        off += n
    return _graph_from(meta, arrays), meta
