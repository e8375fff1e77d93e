"""Dense tensors with tape-based reverse-mode differentiation.

Storage is float32. Every kernel computes in float64 and rounds its result
back to the storage dtype, and gradients accumulate in float64 until they
are handed back to the caller. A tensor created with ``dtype=np.float64``
is accepted anywhere a float32 one is (results then stay float64);
finite-difference oracles rely on this.

Only the primitives needed for MLP classifiers, decoders and latent-space
optimisation exist. Any non-finite value produced by a kernel raises
:class:`NumericError` immediately.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "Gradients",
    "tensor",
    "matmul",
    "add_bias",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "square",
    "exp",
    "relu",
    "leaky_relu",
    "sigmoid",
    "clamp",
    "total",
    "mean",
    "row_sum",
    "mean_rows",
    "row_l2_norm",
    "row_l1_norm",
    "gather",
    "cross_entropy_rows",
    "softmax_cross_entropy",
    "total_variation",
    "forward_layers",
    "forward_pass",
    "backward_pass",
    "finite_diff_grad",
]


class NumericError(FloatingPointError):
    """A kernel produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """A tape was misused (replayed twice, or backward without output)."""


class Tensor:
    """An n-dimensional float array with an optional gradient slot.

    ``data`` is read-only once constructed; only ``grad`` is ever written.
    Storage is float32 unless ``dtype=np.float64`` is requested explicitly.
    Hashing and equality are by identity so tensors can key gradient maps.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        dtype = np.dtype(np.float32 if dtype is None else dtype)
        if dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported tensor dtype {dtype}")
        with np.errstate(over="ignore"):
            arr = np.array(data, dtype=dtype, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        arr.setflags(write=False)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name, dtype=self.dtype)

    def with_grad(self) -> "Tensor":
        """Same values as a fresh leaf that records gradients."""
        return Tensor(self.data, requires_grad=True, name=self.name, dtype=self.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Gradients(dict):
    """Mapping from leaf :class:`Tensor` to its float32 gradient array."""

    def of(self, t: Tensor) -> np.ndarray | None:
        return self.get(t)


class Tape:
    """Records primitive operations while active (as a context manager).

    Nodes are appended in execution order, which is a topological order of
    the computation, so the backward sweep simply walks the list in
    reverse. A tape can be swept exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.output: Tensor | None = None
        self.input: Tensor | None = None
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op: str, inputs: tuple, output: Tensor, backward: Callable) -> None:
        self.nodes.append(_Node(op, inputs, output, backward))

    def backward(self, output: Tensor | None = None, seed=None) -> Gradients:
        """Propagate ``seed`` (default: ones) from ``output`` to every leaf.

        Only leaves with ``requires_grad`` receive gradients; their ``grad``
        slot is overwritten and the same arrays are returned keyed by leaf.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        output = self.output if output is None else output
        if output is None:
            raise TapeError("no output tensor to differentiate")
        self.consumed = True

        if seed is None:
            g0 = np.ones(output.shape, dtype=np.float64)
        else:
            g0 = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
            if g0.shape != output.shape:
                raise ShapeError(f"seed gradient shape {g0.shape} != output shape {output.shape}")

        acc: dict[int, np.ndarray] = {id(output): g0}
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    leaves.setdefault(id(inp), inp)
        if output.requires_grad and id(output) not in produced:
            leaves[id(output)] = output

        for node in reversed(self.nodes):
            gout = acc.pop(id(node.output), None)
            if gout is None:
                continue
            gins = node.backward(gout)
            for inp, gin in zip(node.inputs, gins):
                if gin is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in acc:
                    acc[key] = acc[key] + gin
                else:
                    acc[key] = np.asarray(gin, dtype=np.float64)

        out = Gradients()
        for key, leaf in leaves.items():
            g = acc.get(key)
            if g is None:
                g = np.zeros(leaf.shape, dtype=np.float64)
            g = g.astype(leaf.data.dtype)
            leaf.grad = g
            out[leaf] = g
        self.nodes = []
        return out


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _result_dtype(inputs: Sequence[Tensor]):
    return np.float64 if any(t.data.dtype == np.float64 for t in inputs) else np.float32


def _emit(op: str, value: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    with np.errstate(over="ignore"):
        arr = np.asarray(value, dtype=_result_dtype(inputs), order="C")
    # checked after rounding to the storage dtype, so float32 overflow is caught too
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    arr.setflags(write=False)
    out.data = arr
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(op, inputs, out, backward)
    return out


def _need(t: Tensor) -> bool:
    return t.requires_grad


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a64, b64 = _f64(a), _f64(b)

    def backward(g):
        return (g @ b64.T if _need(a) else None, a64.T @ g if _need(b) else None)

    return _emit("matmul", a64 @ b64, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of an N x d matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")

    def backward(g):
        return (g, g.sum(axis=0) if _need(b) else None)

    return _emit("add_bias", _f64(x) + _f64(b), (x, b), backward)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} != {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", _f64(a) + _f64(b), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", _f64(a) - _f64(b), (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    a64, b64 = _f64(a), _f64(b)
    return _emit("mul", a64 * b64, (a, b), lambda g: (g * b64, g * a64))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", _f64(a) * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def square(a: Tensor) -> Tensor:
    a64 = _f64(a)
    return _emit("square", a64 * a64, (a,), lambda g: (2.0 * a64 * g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(_f64(a))
    return _emit("exp", y, (a,), lambda g: (g * y,))


# -- activations --------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x64 = _f64(x)
    mask = x64 > 0
    return _emit("relu", np.where(mask, x64, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x64 = _f64(x)
    factor = np.where(x64 > 0, 1.0, slope)
    return _emit("leaky_relu", x64 * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    x64 = _f64(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x64))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the value was inside."""
    x64 = _f64(x)
    inside = (x64 >= lo) & (x64 <= hi)
    return _emit("clamp", np.clip(x64, lo, hi), (x,), lambda g: (g * inside,))


# -- reductions (float64 accumulation) -----------------------------------------


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape
    return _emit("sum", np.array(_f64(a).sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, max(a.size, 1)
    return _emit(
        "mean", np.array(_f64(a).sum() / n), (a,), lambda g: (np.broadcast_to(g / n, shape),)
    )


def row_sum(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("row_sum expects a matrix")
    shape = a.shape
    return _emit(
        "row_sum", _f64(a).sum(axis=1), (a,), lambda g: (np.broadcast_to(g[:, None], shape),)
    )


def mean_rows(a: Tensor) -> Tensor:
    """Column means of an N x d matrix, kept as a 1 x d row."""
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError("mean_rows expects a non-empty matrix")
    n, shape = a.shape[0], a.shape
    return _emit(
        "mean_rows",
        _f64(a).sum(axis=0, keepdims=True) / n,
        (a,),
        lambda g: (np.broadcast_to(g / n, shape),),
    )


def row_l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row; the subgradient at a zero row is 0."""
    a64 = _f64(a)
    norms = np.sqrt((a64 * a64).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)

    def backward(g):
        return ((g / safe)[:, None] * a64 * (norms > 0)[:, None],)

    return _emit("row_l2_norm", norms, (a,), backward)


def row_l1_norm(a: Tensor) -> Tensor:
    a64 = _f64(a)
    return _emit(
        "row_l1_norm", np.abs(a64).sum(axis=1), (a,), lambda g: (g[:, None] * np.sign(a64),)
    )


def gather(a: Tensor, index: Sequence[int]) -> Tensor:
    """Pick ``a[i, index[i]]`` for every row i."""
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"gather: index of shape {idx.shape} for {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError("gather index out of range")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _emit("gather", _f64(a)[rows, idx], (a,), backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_rows(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Per-row ``-log softmax(logits)[i, labels[i]]`` (max-subtracted)."""
    y = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"labels of shape {y.shape} for logits {logits.shape}")
    k = logits.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    logp = _log_softmax(_f64(logits))
    rows = np.arange(len(y))
    probs = np.exp(logp)

    def backward(g):
        d = probs.copy()
        d[rows, y] -= 1.0
        return (d * g[:, None],)

    return _emit("cross_entropy", -logp[rows, y], (logits,), backward)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy over the batch and the softmax probabilities."""
    loss = mean(cross_entropy_rows(logits, labels))
    probs = Tensor(np.exp(_log_softmax(_f64(logits))))
    return loss, probs


def total_variation(x: Tensor, height: int, width: int) -> Tensor:
    """Anisotropic total variation of each row viewed as a height x width image."""
    if x.data.ndim != 2 or x.shape[1] != height * width:
        raise ShapeError(f"total_variation: rows of {x.shape} are not {height}x{width}")
    img = _f64(x).reshape(-1, height, width)
    dh = img[:, :, 1:] - img[:, :, :-1]
    dv = img[:, 1:, :] - img[:, :-1, :]
    tv = np.abs(dh).sum(axis=(1, 2)) + np.abs(dv).sum(axis=(1, 2))
    sh, sv = np.sign(dh), np.sign(dv)

    def backward(g):
        out = np.zeros_like(img)
        out[:, :, 1:] += sh
        out[:, :, :-1] -= sh
        out[:, 1:, :] += sv
        out[:, :-1, :] -= sv
        return ((out * g[:, None, None]).reshape(x.shape),)

    return _emit("total_variation", tv, (x,), backward)


# -- layered networks ---------------------------------------------------------

_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "linear": lambda t: t,
}


def forward_layers(layers, x: Tensor, stop: int | None = None) -> Tensor:
    """Apply ``layers[:stop]``; each layer has weight, bias and activation."""
    h = x
    for i, layer in enumerate(layers[:stop]):
        try:
            h = add_bias(matmul(h, layer.weight), layer.bias)
            h = _ACTIVATIONS[layer.activation](h)
        except NumericError as err:
            raise NumericError(f"layer {i} ({layer.activation}): {err}") from None
    return h


def forward_pass(graph, batch: Tensor, input_grad: bool = False) -> tuple[Tensor, Tape]:
    """Evaluate ``graph`` on ``batch`` while recording a fresh tape.

    With ``input_grad`` the batch is re-wrapped as a gradient leaf; the tape
    then exposes it as ``tape.input``.
    """
    if batch.data.ndim != 2 or batch.shape[1] != graph.input_dim:
        raise ShapeError(f"batch of shape {batch.shape} for input dimension {graph.input_dim}")
    if batch.shape[0] < 1:
        raise ShapeError("empty batch")
    x = batch.with_grad() if input_grad else batch
    tape = Tape()
    with tape:
        logits = forward_layers(graph.layers, x)
    tape.output = logits
    tape.input = x
    return logits, tape


def backward_pass(tape: Tape, loss_grad) -> Gradients:
    """Sweep ``tape`` from its recorded output seeded with ``loss_grad``."""
    return tape.backward(tape.output, loss_grad)


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    if not h > 0:
        raise ValueError("step h must be positive")
    base = x.data.astype(np.float64).reshape(-1)
    out = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += h
        minus[i] -= h
        fp = _scalar(f(Tensor(plus.reshape(x.shape), dtype=np.float64)))
        fm = _scalar(f(Tensor(minus.reshape(x.shape), dtype=np.float64)))
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(x.shape), dtype=np.float64)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(np.asarray(v.data, dtype=np.float64).reshape(-1)[0])
    return float(v)


def iter_params(layers) -> Iterable[Tensor]:
    for layer in layers:
        yield layer.weight
        yield layer.bias
