"""Experiment configuration: JSON schema, defaults and loading."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

__all__ = ["LabConfigError", "DEFAULTS", "SCHEMA", "ExperimentConfig", "load_config", "schema_document"]


class LabConfigError(ValueError):
    """Invalid experiment configuration; ``pointer`` locates the offending value."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


DESK_LADDER = [1, 2, 3, 5, 8, 12, 20, 30, 45, 60, 80, 100, 125, 150]

DEFAULTS: dict = {
    "data": {
        "source": "mnist",
        "images": None,
        "labels": None,
        "downsample": 2,
        "blobs": {"n_classes": 10, "n_per_class": 60, "dim": 16, "separation": 0.25, "noise": 0.08, "seed": 0},
    },
    "split": {
        "pretrain_classes": [0, 1, 2, 3, 4],
        "pub_classes": [0, 1, 2, 3, 4],
        "priv_classes": [5, 6, 7, 8, 9],
        "val_fraction": 0.1,
    },
    "target": {"hidden": [128, 128, 64], "activation": "relu"},
    "eval": {
        "hidden": None,
        "seed_offset": 100,
        "train": {"epochs": 30, "batch_size": 64, "learning_rate": 0.02, "momentum": 0.9, "weight_decay": 1e-4},
    },
    "generator": {
        "latent_dim": 16,
        "hidden": [64, 128],
        "latent_penalty": 1e-3,
        "train": {"epochs": 40, "batch_size": 32, "learning_rate": 0.05, "momentum": 0.9, "weight_decay": 0.0},
    },
    "train_pretrain": {
        "epochs": 10,
        "batch_size": 64,
        "learning_rate": 0.02,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "checkpoint_epochs": [10],
    },
    "train_finetune": {
        "epochs": 150,
        "batch_size": 64,
        "learning_rate": 0.02,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "checkpoint_epochs": DESK_LADDER,
    },
    "boundaries": [0, 2],
    "first_layer_control": False,
    "attack": {
        "mode": "point",
        "identity_loss": "nll",
        "prior_weight": 0.3,
        "iterations": 300,
        "learning_rate": 0.02,
        "clip_w": 3.0,
        "attacks_per_class": 5,
        "classes": None,
    },
    "fisher": {
        "enabled": True,
        "distances": ["l2", "l1"],
        "snapshots": [30, 75, 150, 225, 300],
        "centroid_grad": True,
        "max_samples": None,
    },
    "report": {"tolerance": 2.0, "timing": "modeled", "flops_per_second": 1e9, "grid": True},
    "seeds": [0],
    "out": "runs/default",
}

_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_num = {"type": "number"}
_int_list = {"type": "array", "items": _int}
_hidden = {"type": "array", "items": _pos_int}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_train = _obj(
    {
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": _pos_int,
        "learning_rate": {"type": "number", "minimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "checkpoint_epochs": {"type": "array", "items": _pos_int},
    }
)

SCHEMA: dict = _obj(
    {
        "data": _obj(
            {
                "source": {"enum": ["mnist", "idx", "blobs"]},
                "images": {"type": ["string", "null"]},
                "labels": {"type": ["string", "null"]},
                "downsample": _pos_int,
                "blobs": _obj(
                    {
                        "n_classes": {"type": "integer", "minimum": 2},
                        "n_per_class": _pos_int,
                        "dim": {"type": "integer", "minimum": 2},
                        "separation": {"type": "number", "minimum": 0},
                        "noise": {"type": "number", "minimum": 0},
                        "seed": _int,
                    }
                ),
            }
        ),
        "split": _obj(
            {
                "pretrain_classes": _int_list,
                "pub_classes": _int_list,
                "priv_classes": _int_list,
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            }
        ),
        "target": _obj({"hidden": _hidden, "activation": {"enum": ["relu", "leaky_relu", "sigmoid"]}}),
        "eval": _obj({"hidden": {"anyOf": [_hidden, {"type": "null"}]}, "seed_offset": _int, "train": _train}),
        "generator": _obj(
            {
                "latent_dim": _pos_int,
                "hidden": _hidden,
                "latent_penalty": {"type": "number", "minimum": 0},
                "train": _train,
            }
        ),
        "train_pretrain": _train,
        "train_finetune": _train,
        "boundaries": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "first_layer_control": {
            "anyOf": [
                {"type": "boolean"},
                _obj({"k_first": _pos_int, "head": {"enum": ["trainable", "frozen"]}}),
            ]
        },
        "attack": _obj(
            {
                "mode": {"enum": ["point", "distributional", "input_space"]},
                "identity_loss": {"enum": ["nll", "logit"]},
                "prior_weight": {"type": "number", "minimum": 0},
                "iterations": _pos_int,
                "learning_rate": {"type": "number", "minimum": 0},
                "clip_w": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "attacks_per_class": _pos_int,
                "classes": {"anyOf": [_int_list, {"type": "null"}]},
            }
        ),
        "fisher": _obj(
            {
                "enabled": {"type": "boolean"},
                "distances": {"type": "array", "items": {"enum": ["l2", "l1"]}},
                "snapshots": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "centroid_grad": {"type": "boolean"},
                "max_samples": {"type": ["integer", "null"], "minimum": 1},
            }
        ),
        "report": _obj(
            {
                "tolerance": {"type": "number", "minimum": 0},
                "timing": {"enum": ["modeled", "wall"]},
                "flops_per_second": {"type": "number", "exclusiveMinimum": 0},
                "grid": {"type": "boolean"},
            }
        ),
        "seeds": {"type": "array", "items": _int, "minItems": 1},
        "out": {"type": "string"},
    }
)


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def _validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if not errors:
        return
    err = errors[0]
    # descend into anyOf branches for a more specific message
    while err.context:
        err = min(err.context, key=lambda e: (-len(e.absolute_path), e.message))
    path = list(err.absolute_path)
    if err.validator == "additionalProperties":
        known = set(err.schema.get("properties", {}))
        extra = sorted(set(err.instance) - known)
        raise LabConfigError(f"unknown key {extra[0]!r}", _pointer(path + [extra[0]]))
    raise LabConfigError(err.message, _pointer(path))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """A validated configuration with every default filled in."""

    raw: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def out_dir(self) -> Path:
        out = Path(self.raw["out"])
        return out if out.is_absolute() else self.base_dir / out

    @property
    def n_layers(self) -> int:
        return len(self.raw["target"]["hidden"]) + 1

    @property
    def control(self) -> dict | None:
        c = self.raw["first_layer_control"]
        if c is False:
            return None
        c = {} if c is True else c
        return {"k_first": c.get("k_first", 1), "head": c.get("head", "trainable")}

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2) + "\n"

    def with_overrides(self, boundary=None, seed=None, out=None) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        if boundary is not None:
            raw["boundaries"] = [int(boundary)]
        if seed is not None:
            raw["seeds"] = [int(seed)]
        if out is not None:
            raw["out"] = str(Path(out).resolve())
        cfg = ExperimentConfig(raw, self.base_dir)
        _check_semantics(cfg)
        return cfg


def _check_semantics(cfg: ExperimentConfig) -> None:
    raw = cfg.raw
    n_layers = cfg.n_layers
    for i, b in enumerate(raw["boundaries"]):
        if b > n_layers:
            raise LabConfigError(f"boundary {b} outside [0, {n_layers}]", f"/boundaries/{i}")
    control = cfg.control
    if control is not None and not 1 <= control["k_first"] < n_layers:
        raise LabConfigError(f"k_first must lie in [1, {n_layers - 1}]", "/first_layer_control/k_first")
    if raw["data"]["source"] == "idx":
        for key in ("images", "labels"):
            path = cfg.resolve(raw["data"][key])
            if path is None or not path.exists():
                raise LabConfigError(f"file not found: {raw['data'][key]}", f"/data/{key}")
    snaps = raw["fisher"]["snapshots"]
    if snaps != sorted(snaps) or any(s > raw["attack"]["iterations"] for s in snaps):
        raise LabConfigError("snapshots must be ascending and <= attack iterations", "/fisher/snapshots")
    if len(set(raw["seeds"])) != len(raw["seeds"]):
        raise LabConfigError("duplicate seeds", "/seeds")


def load_config(source, base_dir=None) -> ExperimentConfig:
    """Load a JSON file path or an already-parsed mapping."""
    if isinstance(source, dict):
        raw = source
        base = Path(base_dir) if base_dir else Path.cwd()
    else:
        path = Path(source)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise LabConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise LabConfigError(f"invalid JSON: {err}") from None
        base = Path(base_dir) if base_dir else path.resolve().parent
    if not isinstance(raw, dict):
        raise LabConfigError("top level must be an object")
    _validate(raw)
    cfg = ExperimentConfig(_merge(DEFAULTS, raw), base)
    _check_semantics(cfg)
    return cfg


def schema_document() -> str:
    """Schema plus defaults, printed by ``--print-schema``."""
    return json.dumps({"schema": SCHEMA, "defaults": DEFAULTS}, indent=2) + "\n"
