"""IDX ingestion, synthetic blobs and the class-disjoint split protocol."""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "ConsistencyError",
    "ProtocolError",
    "LabeledSet",
    "DatasetBundle",
    "load_idx",
    "write_idx",
    "synth_blobs",
    "mnist_subset",
    "split_disjoint",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass
class LabeledSet:
    images: np.ndarray  # N x d_X float32 in [0, 1]
    labels: np.ndarray  # N int64
    shape: tuple[int, int] | None = None  # image height/width when known

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or len(self.images) != len(self.labels):
            raise ConsistencyError("images must be N x d with one label per row")
        if len(self.labels) < 1:
            raise ConsistencyError("a labeled set needs at least one sample")

    @property
    def class_ids(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "LabeledSet":
        index = np.asarray(index, dtype=np.int64)
        return LabeledSet(self.images[index], self.labels[index], self.shape)

    def of_class(self, c: int) -> np.ndarray:
        return self.images[self.labels == c]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


@dataclass
class DatasetBundle:
    """The four splits. Labels are dense per split; the manifest keeps source ids."""

    pretrain: LabeledSet
    pub: LabeledSet
    priv: LabeledSet
    priv_val: LabeledSet
    manifest: dict = field(default_factory=dict)

    @property
    def priv_full(self) -> LabeledSet:
        return LabeledSet(
            np.concatenate([self.priv.images, self.priv_val.images]),
            np.concatenate([self.priv.labels, self.priv_val.labels]),
            self.priv.shape,
        )

    def manifest_json(self) -> str:
        return json.dumps(self.manifest, sort_keys=True, indent=2) + "\n"


def _open(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{what}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if payload.size != count:
        raise FormatError(f"{what}: payload has {payload.size} bytes, header promises {count}")
    return payload.reshape(dims)


def load_idx(images_path, labels_path) -> LabeledSet:
    """Read an unsigned-byte IDX image/label pair; pixels are divided by 255."""
    images = _parse_idx(_open(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_open(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = images.shape
    flat = images.reshape(n, h * w).astype(np.float32) / np.float32(255.0)
    return LabeledSet(flat, labels.astype(np.int64), (h, w))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write N x H x W uint8 images and N uint8 labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ConsistencyError("expected N x H x W images and N labels")
    Path(images_path).write_bytes(
        struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def synth_blobs(
    n_classes: int,
    n_per_class: int,
    dim: int,
    separation: float,
    noise: float,
    seed: int,
) -> LabeledSet:
    """Gaussian blobs around class means drawn once from ``seed``, clipped to [0, 1]."""
    if n_classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    rng = np.random.default_rng(seed)
    means = np.clip(0.5 + separation * rng.standard_normal((n_classes, dim)), 0.0, 1.0)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = means[labels] + noise * rng.standard_normal((len(labels), dim))
    side = int(round(np.sqrt(dim)))
    shape = (side, side) if side * side == dim else None
    out = LabeledSet(np.clip(x, 0.0, 1.0), labels, shape)
    out.means = means  # type: ignore[attr-defined]
    return out


def mnist_subset() -> tuple[np.ndarray, np.ndarray]:
    """The 5000-image MNIST sample bundled with mlxtend (500 per digit, uint8 28x28)."""
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    return x.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8)


def _route(source: LabeledSet, classes: list[int]) -> LabeledSet:
    mask = np.isin(source.labels, classes)
    if not mask.any():
        raise ProtocolError(f"no samples for classes {classes}")
    remap = {c: i for i, c in enumerate(sorted(classes))}
    dense = np.array([remap[int(c)] for c in source.labels[mask]], dtype=np.int64)
    return LabeledSet(source.images[mask], dense, source.shape)


def split_disjoint(
    source: LabeledSet,
    pretrain_classes,
    pub_classes,
    priv_classes,
    val_fraction: float,
    seed: int,
) -> DatasetBundle:
    """Route samples by class into pretrain / pub / priv and split priv into train/val.

    ``pub`` may coincide with ``pretrain``; every other pair must be
    disjoint. The validation count per private class is ``floor`` of
    ``val_fraction`` times that class's size.
    """
    pretrain_classes = sorted(int(c) for c in pretrain_classes)
    pub_classes = sorted(int(c) for c in pub_classes)
    priv_classes = sorted(int(c) for c in priv_classes)
    if not 0.0 < val_fraction < 1.0:
        raise ProtocolError("val_fraction must lie strictly between 0 and 1")
    for name, cls in (("pretrain", pretrain_classes), ("pub", pub_classes), ("priv", priv_classes)):
        if not cls:
            raise ProtocolError(f"{name} class list is empty")
        if len(set(cls)) != len(cls):
            raise ProtocolError(f"{name} class list has duplicates")
        missing = set(cls) - set(source.class_ids)
        if missing:
            raise ProtocolError(f"{name} classes {sorted(missing)} absent from source")
    if set(priv_classes) & set(pub_classes):
        raise ProtocolError("private and public classes overlap")
    if set(priv_classes) & set(pretrain_classes):
        raise ProtocolError("private and pretrain classes overlap")
    if pub_classes != pretrain_classes and set(pub_classes) & set(pretrain_classes):
        raise ProtocolError("public and pretrain classes partially overlap")

    pretrain = _route(source, pretrain_classes)
    pub = _route(source, pub_classes)
    priv_all = _route(source, priv_classes)

    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(len(priv_classes)):
        idx = np.flatnonzero(priv_all.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(np.floor(val_fraction * len(idx)))
        val_idx.extend(sorted(idx[:n_val].tolist()))
        train_idx.extend(sorted(idx[n_val:].tolist()))
    if not val_idx or not train_idx:
        raise ProtocolError("private split leaves train or validation empty")
    priv = priv_all.subset(sorted(train_idx))
    priv_val = priv_all.subset(sorted(val_idx))

    def counts(ds: LabeledSet, ids: list[int]) -> dict[str, int]:
        return {str(ids[c]): int((ds.labels == c).sum()) for c in range(len(ids))}

    manifest = {
        "pretrain_classes": pretrain_classes,
        "pub_classes": pub_classes,
        "priv_classes": priv_classes,
        "val_fraction": float(val_fraction),
        "seed": int(seed),
        "counts": {
            "pretrain": counts(pretrain, pretrain_classes),
            "pub": counts(pub, pub_classes),
            "priv": counts(priv, priv_classes),
            "priv_val": counts(priv_val, priv_classes),
        },
    }
    return DatasetBundle(pretrain, pub, priv, priv_val, manifest)
