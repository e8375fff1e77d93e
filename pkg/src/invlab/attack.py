"""White-box model inversion by gradient descent on generator latents.

Each (class, restart) entry minimises

    identity_loss(T, G(w), y) + prior_weight * prior(w)

with plain gradient descent, and keeps the best iterate seen. Entries are
independent; a campaign stacks them as rows of one latent matrix so a
single forward/backward serves all of them.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .models import GeneratorGraph, ModelGraph, logits_of, predict_proba
from .tensor import (
    NumericError,
    Tape,
    Tensor,
    add,
    clamp,
    cross_entropy_rows,
    exp,
    forward_layers,
    gather,
    mul,
    neg,
    row_sum,
    scale,
    square,
    total,
    total_variation,
)

__all__ = [
    "AttackError",
    "AttackConfig",
    "AttackEntry",
    "AttackRun",
    "identity_loss",
    "prior_loss",
    "invert_identity",
    "attack_campaign",
    "likelihood_histogram",
    "likelihood_csv",
    "write_pgm",
    "read_pgm",
    "image_grid",
]

MODES = ("point", "distributional", "input_space")
IDENTITY_LOSSES = ("nll", "logit")


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    mode: str = "point"
    identity_loss: str = "nll"
    prior_weight: float = 1.0
    iterations: int = 300
    learning_rate: float = 0.02
    clip_w: float | None = None
    attacks_per_class: int = 5
    seed: int = 0
    init_std: float | None = None  # point: 1.0, distributional: sqrt(0.1)
    init_sigma: float = float(np.exp(-2.0))
    learn_sigma: bool = True
    input_l2: float = 1e-3  # input_space prior: TV + input_l2 * ||x||^2
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.identity_loss not in IDENTITY_LOSSES:
            raise ValueError(f"identity_loss must be one of {IDENTITY_LOSSES}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be >= 0")
        if self.attacks_per_class < 1:
            raise ValueError("attacks_per_class must be >= 1")
        if self.clip_w is not None and self.clip_w <= 0:
            raise ValueError("clip_w must be positive when set")
        if self.image_shape is not None:
            self.image_shape = tuple(self.image_shape)

    @property
    def start_std(self) -> float:
        if self.init_std is not None:
            return float(self.init_std)
        return float(np.sqrt(0.1)) if self.mode == "distributional" else 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttackEntry:
    target_class: int
    restart: int
    latent: np.ndarray
    reconstruction: np.ndarray
    objective_trace: np.ndarray
    likelihood_trace: np.ndarray
    best_iteration: int
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def initial_objective(self) -> float:
        return float(self.objective_trace[0])

    @property
    def final_objective(self) -> float:
        return float(self.objective_trace[self.best_iteration])

    @property
    def likelihood(self) -> float:
        return float(self.likelihood_trace[self.best_iteration])


@dataclass
class AttackRun:
    config: AttackConfig
    entries: list[AttackEntry]
    target_id: str = ""
    generator_id: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def classes(self) -> np.ndarray:
        return np.array([e.target_class for e in self.entries], dtype=np.int64)

    @property
    def reconstructions(self) -> np.ndarray:
        return np.stack([e.reconstruction for e in self.entries])

    @property
    def latents(self) -> np.ndarray:
        return np.stack([e.latent for e in self.entries])

    def snapshot(self, iteration: int) -> np.ndarray:
        return np.stack([e.snapshots[iteration] for e in self.entries])

    def by_class(self) -> dict[int, list[AttackEntry]]:
        out: dict[int, list[AttackEntry]] = {}
        for e in self.entries:
            out.setdefault(e.target_class, []).append(e)
        return out

    def to_json(self) -> str:
        cfg = asdict(self.config)
        return json.dumps(
            {
                "config": cfg,
                "target_id": self.target_id,
                "generator_id": self.generator_id,
                "entries": [
                    {
                        "class": e.target_class,
                        "restart": e.restart,
                        "best_iteration": e.best_iteration,
                        "initial_objective": e.initial_objective,
                        "final_objective": e.final_objective,
                        "likelihood": e.likelihood,
                        "latent": [float(v) for v in e.latent],
                        "objective_trace": [float(v) for v in e.objective_trace],
                    }
                    for e in self.entries
                ],
            },
            indent=1,
        )


# -- losses -------------------------------------------------------------------


def _identity_rows(logits: Tensor, classes: np.ndarray, kind: str) -> Tensor:
    if kind == "nll":
        return cross_entropy_rows(logits, classes)
    return neg(gather(logits, classes))


def identity_loss(target: ModelGraph, x, y: int, kind: str = "nll") -> tuple[float, np.ndarray]:
    """Identity loss of a single input and its gradient with respect to the input.

    ``nll`` is ``-log P_T(y|x)``; ``logit`` is the negated pre-softmax logit of ``y``.
    """
    if kind not in IDENTITY_LOSSES:
        raise ValueError(f"kind must be one of {IDENTITY_LOSSES}")
    if not 0 <= y < target.output_dim:
        raise IndexError(f"class {y} outside [0, {target.output_dim})")
    x = (x if isinstance(x, Tensor) else Tensor(x)).with_grad()
    row = Tensor(x.data.reshape(1, -1), requires_grad=True, dtype=x.data.dtype) if x.data.ndim == 1 else x
    tape = Tape()
    with tape:
        loss = total(_identity_rows(forward_layers(target.layers, row), np.array([y]), kind))
    grads = tape.backward(loss)
    return float(loss.data), grads[row].reshape(x.shape)


def _prior_rows(v: Tensor, mode: str, image_shape=None, input_l2: float = 1e-3) -> Tensor:
    if mode == "input_space":
        h, w = image_shape
        return add(total_variation(v, h, w), scale(row_sum(square(v)), input_l2))
    return scale(row_sum(square(v)), 0.5)


def prior_loss(w, mode: str = "point", image_shape=None, input_l2: float = 1e-3) -> tuple[float, np.ndarray]:
    """Prior penalty and its gradient.

    Latent modes use ``0.5 * ||w||^2``; ``input_space`` uses anisotropic total
    variation plus ``input_l2 * ||x||^2`` on the image.
    """
    w = w if isinstance(w, Tensor) else Tensor(w)
    row = Tensor(w.data.reshape(1, -1), requires_grad=True, dtype=w.data.dtype)
    if mode == "input_space" and image_shape is None:
        side = int(round(np.sqrt(row.shape[1])))
        image_shape = (side, row.shape[1] // side)
    tape = Tape()
    with tape:
        loss = total(_prior_rows(row, mode, image_shape, input_l2))
    grads = tape.backward(loss)
    return float(loss.data), grads[row].reshape(w.shape)


# -- optimisation -------------------------------------------------------------


def _entry_rngs(seed: int, cls: int, restart: int):
    return np.random.default_rng([seed, cls, restart, 0]), np.random.default_rng([seed, cls, restart, 1])


def _optimize(
    target: ModelGraph,
    generator: GeneratorGraph | None,
    classes: np.ndarray,
    restarts: np.ndarray,
    cfg: AttackConfig,
    snapshots=(),
) -> list[AttackEntry]:
    mode = cfg.mode
    n = len(classes)
    if mode == "input_space":
        dim = target.input_dim
        image_shape = cfg.image_shape
        if image_shape is None:
            side = int(round(np.sqrt(dim)))
            image_shape = (side, dim // side)
        if image_shape[0] * image_shape[1] != dim:
            raise AttackError(f"image_shape {image_shape} does not match input dimension {dim}")
    else:
        if generator is None:
            raise AttackError(f"{mode} mode needs a generator")
        if generator.data_dim != target.input_dim:
            raise AttackError("generator output does not match the target input dimension")
        dim = generator.latent_dim
        image_shape = None

    init_rngs = [_entry_rngs(cfg.seed, int(c), int(u)) for c, u in zip(classes, restarts)]
    if mode == "input_space":
        start = np.stack([r[0].uniform(0.0, 1.0, dim) for r in init_rngs])
    else:
        start = np.stack([r[0].standard_normal(dim) for r in init_rngs]) * cfg.start_std
        if cfg.clip_w is not None:
            start = np.clip(start, -cfg.clip_w, cfg.clip_w)
    loc = start.astype(np.float32)
    log_sigma = np.full((n, dim), np.log(cfg.init_sigma) if cfg.init_sigma > 0 else 0.0, np.float32)
    sigma_const = np.full((n, dim), cfg.init_sigma, np.float32)

    iters = cfg.iterations
    obj_trace = np.zeros((n, iters + 1))
    lik_trace = np.zeros((n, iters + 1))
    best_obj = np.full(n, np.inf)
    best_iter = np.zeros(n, dtype=np.int64)
    best_latent = loc.copy()
    snaps = sorted(set(int(s) for s in snapshots))
    snap_latent: dict[int, np.ndarray] = {}

    for t in range(iters + 1):
        loc_t = Tensor(loc, requires_grad=True)
        tape = Tape()
        try:
            with tape:
                if mode == "distributional":
                    eps = np.stack([r[1].standard_normal(dim) for r in init_rngs]).astype(np.float32)
                    if cfg.learn_sigma:
                        ls_t = Tensor(log_sigma, requires_grad=True)
                        noise = mul(exp(ls_t), Tensor(eps))
                    else:
                        ls_t = None
                        noise = Tensor(sigma_const * eps)
                    w = add(loc_t, noise)
                    if cfg.clip_w is not None:
                        w = clamp(w, -cfg.clip_w, cfg.clip_w)
                else:
                    w = loc_t
                x = w if mode == "input_space" else forward_layers(generator.layers, w)
                logits = forward_layers(target.layers, x)
                objective = _identity_rows(logits, classes, cfg.identity_loss)
                if cfg.prior_weight:
                    prior = _prior_rows(w, mode, image_shape, cfg.input_l2)
                    objective = add(objective, scale(prior, cfg.prior_weight))
                loss = total(objective)
        except NumericError as err:
            raise NumericError(f"iteration {t}: {err}") from None

        obj = objective.data.astype(np.float64)
        obj_trace[:, t] = obj
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        lik_trace[:, t] = p[np.arange(n), classes]
        w_now = w.data.astype(np.float32)
        better = obj < best_obj
        best_obj[better] = obj[better]
        best_iter[better] = t
        best_latent[better] = w_now[better]
        if t in snaps:
            snap_latent[t] = best_latent.copy()
        if t == iters:
            break

        grads = tape.backward(loss)
        step = cfg.learning_rate * grads[loc_t].astype(np.float64)
        new_loc = loc.astype(np.float64) - step
        if mode == "input_space":
            new_loc = np.clip(new_loc, 0.0, 1.0)
        elif cfg.clip_w is not None:
            new_loc = np.clip(new_loc, -cfg.clip_w, cfg.clip_w)
        loc = new_loc.astype(np.float32)
        if mode == "distributional" and cfg.learn_sigma:
            log_sigma = (log_sigma.astype(np.float64) - cfg.learning_rate * grads[ls_t]).astype(np.float32)

    def render(latents: np.ndarray) -> np.ndarray:
        if mode == "input_space":
            return latents.astype(np.float32)
        return forward_layers(generator.layers, Tensor(latents)).data.astype(np.float32)

    recon = render(best_latent)
    snap_recon = {t: render(v) for t, v in snap_latent.items()}
    return [
        AttackEntry(
            target_class=int(classes[i]),
            restart=int(restarts[i]),
            latent=best_latent[i].copy(),
            reconstruction=recon[i],
            objective_trace=obj_trace[i],
            likelihood_trace=lik_trace[i],
            best_iteration=int(best_iter[i]),
            snapshots={t: r[i] for t, r in snap_recon.items()},
        )
        for i in range(n)
    ]


def invert_identity(
    target: ModelGraph,
    generator: GeneratorGraph | None,
    y: int,
    cfg: AttackConfig,
    restart: int = 0,
    snapshots=(),
) -> AttackEntry:
    """Run one inversion for class ``y``; returns the best iterate found."""
    if not 0 <= y < target.output_dim:
        raise IndexError(f"class {y} outside [0, {target.output_dim})")
    if cfg.mode == "distributional" and generator is None:
        raise AttackError("distributional mode needs a generator")
    return _optimize(target, generator, np.array([y]), np.array([restart]), cfg, snapshots)[0]


def attack_campaign(
    target: ModelGraph,
    generator: GeneratorGraph | None,
    classes,
    cfg: AttackConfig,
    snapshots=(),
    target_id: str = "",
    generator_id: str = "",
) -> AttackRun:
    """``cfg.attacks_per_class`` restarts for every class, ordered by (class, restart)."""
    classes = [int(c) for c in classes]
    if not classes:
        raise AttackError("class list is empty")
    for c in classes:
        if not 0 <= c < target.output_dim:
            raise IndexError(f"class {c} outside [0, {target.output_dim})")
    if any(s > cfg.iterations or s < 0 for s in snapshots):
        raise AttackError("snapshot iteration outside [0, iterations]")
    cls = np.repeat(np.array(classes, dtype=np.int64), cfg.attacks_per_class)
    rst = np.tile(np.arange(cfg.attacks_per_class, dtype=np.int64), len(classes))
    try:
        entries = _optimize(target, generator, cls, rst, cfg, snapshots)
    except NumericError:
        # locate the failing entry so the error names it
        for c, u in zip(cls, rst):
            try:
                _optimize(target, generator, np.array([c]), np.array([u]), cfg, snapshots)
            except NumericError as err:
                raise AttackError(f"class {c} restart {u}: {err}") from None
        raise
    return AttackRun(cfg, entries, target_id, generator_id)


# -- reports ------------------------------------------------------------------


def likelihood_histogram(run: AttackRun, target: ModelGraph, eval_model: ModelGraph) -> list[dict]:
    """Per reconstruction: target likelihood of the attacked class and eval success."""
    x = run.reconstructions
    cls = run.classes
    p_t = predict_proba(target, x)[np.arange(len(cls)), cls]
    pred = logits_of(eval_model, x).argmax(axis=1)
    return [
        {
            "class": int(c),
            "restart": int(e.restart),
            "likelihood": float(p),
            "eval_pred": int(q),
            "success": int(q == c),
        }
        for e, c, p, q in zip(run.entries, cls, p_t, pred)
    ]


LIKELIHOOD_COLUMNS = ["class", "restart", "likelihood", "eval_pred", "success"]


def likelihood_csv(rows: list[dict], extra: dict | None = None) -> str:
    extra = extra or {}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*extra.keys(), *LIKELIHOOD_COLUMNS])
    for r in rows:
        writer.writerow(
            [*extra.values(), r["class"], r["restart"], f"{r['likelihood']:.6f}", r["eval_pred"], r["success"]]
        )
    return buf.getvalue()


def image_grid(images: np.ndarray, height: int, width: int, cols: int, pad: int = 1) -> np.ndarray:
    """Tile flat images into a uint8 grid (values clipped to [0, 1] first)."""
    n = len(images)
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    grid = np.zeros((rows * (height + pad) + pad, cols * (width + pad) + pad), dtype=np.uint8)
    pix = np.round(np.clip(images, 0.0, 1.0) * 255).astype(np.uint8).reshape(n, height, width)
    for k in range(n):
        r, c = divmod(k, cols)
        y0, x0 = pad + r * (height + pad), pad + c * (width + pad)
        grid[y0 : y0 + height, x0 : x0 + width] = pix[k]
    return grid


def write_pgm(path, image: np.ndarray) -> Path:
    """Write a 2-D uint8 array as binary PGM (P5, maxval 255)."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    h, w = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    data = raw[pos + 1 : pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError("truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
