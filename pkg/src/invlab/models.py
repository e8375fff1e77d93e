"""Classifier, decoder and evaluation-model construction plus freeze partitions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, forward_layers

__all__ = [
    "SpecError",
    "StructureError",
    "Layer",
    "ModelGraph",
    "GeneratorGraph",
    "FreezePartition",
    "build_classifier",
    "build_decoder",
    "build_encoder",
    "eval_widths",
    "partition_freeze",
    "count_trainable",
    "penultimate_features",
    "predict_proba",
    "logits_of",
]


class SpecError(ValueError):
    """A list of layer widths is malformed."""


class StructureError(ValueError):
    """The model lacks the structure an operation needs."""


@dataclass
class Layer:
    weight: Tensor  # fan_in x fan_out, row-major
    bias: Tensor
    activation: str

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    def params(self) -> tuple[Tensor, Tensor]:
        return self.weight, self.bias


@dataclass
class ModelGraph:
    layers: list[Layer]
    arch_id: str
    boundary: int = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [layer.fan_out for layer in self.layers]

    def __len__(self) -> int:
        return len(self.layers)

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def trainable_params(self) -> list[Tensor]:
        return [p for p in self.params() if p.requires_grad]

    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def clone(self) -> "ModelGraph":
        layers = [
            Layer(
                Tensor(l.weight.data, requires_grad=l.weight.requires_grad),
                Tensor(l.bias.data, requires_grad=l.bias.requires_grad),
                l.activation,
            )
            for l in self.layers
        ]
        return type(self)(**{**self.__dict__, "layers": layers})

    def set_params(self, arrays) -> None:
        """Replace parameter values in layer order (weight, bias, ...)."""
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.layers):
            raise StructureError("parameter list does not match layer count")
        for i, layer in enumerate(self.layers):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if np.shape(w) != layer.weight.shape or np.shape(b) != layer.bias.shape:
                raise StructureError(f"layer {i}: parameter shape mismatch")
            layer.weight = Tensor(w, requires_grad=layer.weight.requires_grad)
            layer.bias = Tensor(b, requires_grad=layer.bias.requires_grad)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return forward_layers(self.layers, x)


@dataclass
class GeneratorGraph(ModelGraph):
    """Decoder from a latent vector to data space; outputs lie in [0, 1]."""

    @property
    def latent_dim(self) -> int:
        return self.input_dim

    @property
    def data_dim(self) -> int:
        return self.output_dim


@dataclass(frozen=True)
class FreezePartition:
    boundary: int
    n_frozen: int
    n_trainable: int
    n_layers: int = field(default=0)

    @property
    def n_total(self) -> int:
        return self.n_frozen + self.n_trainable


def _he_layer(rng: np.random.Generator, fan_in: int, fan_out: int, activation: str) -> Layer:
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
    return Layer(
        Tensor(w, requires_grad=True),
        Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True),
        activation,
    )


def _check_widths(widths) -> list[int]:
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise SpecError(f"need at least an input and an output width, got {widths}")
    if any(w <= 0 for w in widths):
        raise SpecError(f"widths must be positive, got {widths}")
    return widths


def build_classifier(
    widths, seed: int, arch_id: str | None = None, hidden_activation: str = "relu"
) -> ModelGraph:
    """MLP with He-uniform weights and zero biases; the last layer emits logits.

    ``widths`` lists the input dimension, hidden widths and class count K.
    """
    widths = _check_widths(widths)
    if widths[-1] < 2:
        raise SpecError("a classifier needs K >= 2 outputs")
    rng = np.random.default_rng(seed)
    n = len(widths) - 1
    layers = [
        _he_layer(rng, widths[i], widths[i + 1], "linear" if i == n - 1 else hidden_activation)
        for i in range(n)
    ]
    return ModelGraph(layers, arch_id or "mlp-" + "-".join(map(str, widths)))


def build_decoder(latent_dim: int, hidden, data_dim: int, seed: int) -> GeneratorGraph:
    """Latent -> LeakyReLU(0.2) hidden layers -> sigmoid output."""
    if latent_dim < 1:
        raise SpecError("latent_dim must be >= 1")
    widths = _check_widths([latent_dim, *hidden, data_dim])
    rng = np.random.default_rng(seed)
    n = len(widths) - 1
    layers = [
        _he_layer(rng, widths[i], widths[i + 1], "sigmoid" if i == n - 1 else "leaky_relu")
        for i in range(n)
    ]
    return GeneratorGraph(layers, "dec-" + "-".join(map(str, widths)))


def build_encoder(data_dim: int, hidden, latent_dim: int, seed: int) -> ModelGraph:
    """Encoder paired with a decoder during prior training (linear latent head)."""
    widths = _check_widths([data_dim, *hidden, latent_dim])
    rng = np.random.default_rng(seed)
    n = len(widths) - 1
    layers = [
        _he_layer(rng, widths[i], widths[i + 1], "linear" if i == n - 1 else "leaky_relu")
        for i in range(n)
    ]
    return ModelGraph(layers, "enc-" + "-".join(map(str, widths)))


def eval_widths(target_widths) -> list[int]:
    """Default evaluation architecture: one extra hidden layer and doubled widths."""
    w = list(target_widths)
    hidden = [2 * h for h in w[1:-1]]
    extra = hidden[-1] if hidden else 2 * w[-1]
    return [w[0], *hidden, extra, w[-1]]


def partition_freeze(graph: ModelGraph, boundary: int) -> FreezePartition:
    """Freeze layers ``< boundary`` (E) and unfreeze the rest (C)."""
    n = len(graph.layers)
    if not 0 <= boundary <= n:
        raise IndexError(f"boundary {boundary} outside [0, {n}]")
    frozen = trainable = 0
    for i, layer in enumerate(graph.layers):
        on = i >= boundary
        for p in layer.params():
            p.requires_grad = on
            p.grad = None
        if on:
            trainable += layer.n_params
        else:
            frozen += layer.n_params
    graph.boundary = boundary
    return FreezePartition(boundary, frozen, trainable, n)


def count_trainable(partition: FreezePartition) -> int:
    return partition.n_trainable


def penultimate_features(graph: ModelGraph, batch) -> Tensor:
    """Post-activation output of the last hidden layer."""
    if len(graph.layers) < 2:
        raise StructureError("a single-layer model has no penultimate layer")
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    if batch.data.ndim != 2 or batch.shape[1] != graph.input_dim:
        raise ShapeError(f"batch of shape {batch.shape} for input dimension {graph.input_dim}")
    return forward_layers(graph.layers, batch, stop=len(graph.layers) - 1)


def predict_proba(graph: ModelGraph, batch) -> np.ndarray:
    """Softmax probabilities as a float64 array (no tape kept)."""
    z = logits_of(graph, batch)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logits_of(graph: ModelGraph, batch) -> np.ndarray:
    """Logits as a float64 array, computed without recording a tape."""
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    if batch.data.ndim != 2 or batch.shape[1] != graph.input_dim:
        raise ShapeError(f"batch of shape {batch.shape} for input dimension {graph.input_dim}")
    return forward_layers(graph.layers, batch).data.astype(np.float64)
