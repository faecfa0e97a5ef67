"""Experiment configuration: versioned JSON schema, loading, object builders."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import jsonschema

from .data import Dataset, TransferTaskPair, generate_synthetic_pair, load_idx, \
    make_split_transfer, render_digits
from .nets import Conv2D, FullyConnected, GlobalAvgPool, MaxPool, ReLU, SoftmaxHead
from .optim import EarlyStop, TrainConfig
from .transfer import desknet

SCHEMA_VERSION = 1

_TASK_COMMON = {
    "source_classes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    "target_classes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    "per_class_train": {"type": "integer", "minimum": 1},
    "val_fraction": {"type": "number", "minimum": 0, "maximum": 1},
    "split_seed": {"type": "integer"},
}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "task", "train", "seeds", "output_dir"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "task": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["idx", "digits", "synthetic"]},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "n_per_class": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "dims": {"type": "array", "items": {"type": "integer", "minimum": 1},
                         "minItems": 3, "maxItems": 3},
                "source_k": {"type": "integer", "minimum": 2},
                "target_k": {"type": "integer", "minimum": 2},
                "shift": {"type": "number", "minimum": 0},
                "noise": {"type": "number", "minimum": 0},
                **_TASK_COMMON,
            },
        },
        "arch": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["desknet"]},
            },
        },
        "penalty": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["none", "L2", "L2SP", "L2SP_FISHER", "L1SP",
                                  "GLSP", "GLSP_FISHER"]},
                "alpha": {"type": "number", "minimum": 0},
                "beta": {"type": "number", "minimum": 0},
                "alpha_grid": {"type": "array", "items": {"type": "number", "minimum": 0},
                               "minItems": 1},
                "beta_grid": {"type": "array", "items": {"type": "number", "minimum": 0},
                              "minItems": 1},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["base_lr", "total_iters", "decay_at"],
            "properties": {
                "base_lr": {"type": "number", "exclusiveMinimum": 0},
                "total_iters": {"type": "integer", "minimum": 1},
                "decay_at": {"type": "integer", "minimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "decay_factor": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["SMOOTHED", "PROX_SPLIT"]},
                "frozen_layers": {"type": "integer", "minimum": 0},
                "early_stop": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "properties": {
                        "eval_every": {"type": "integer", "minimum": 1},
                        "patience": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "output_dir": {"type": "string"},
        "checkpoint": {"type": "string"},
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "val_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "test_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "fisher": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "m": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "folds": {"type": "integer", "minimum": 2},
            },
        },
        "freeze": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kinds", "k_values"],
            "properties": {
                "k_values": {"type": "array", "items": {"type": "integer", "minimum": 0},
                             "minItems": 1},
                "kinds": {"type": "array", "minItems": 1, "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "alpha"],
                    "properties": {
                        "kind": {"enum": ["L2", "L2SP"]},
                        "alpha": {"type": "number", "minimum": 0},
                        "beta": {"type": "number", "minimum": 0},
                    },
                }},
            },
        },
        "compare": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind", "alpha"],
                "properties": {
                    "kind": {"enum": ["L2", "L2SP", "L2SP_FISHER", "L1SP", "GLSP",
                                      "GLSP_FISHER"]},
                    "alpha": {"type": "number", "minimum": 0},
                    "beta": {"type": "number", "minimum": 0},
                },
            },
        },
        "theory": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "trials": {"type": "integer", "minimum": 1},
                "max_dim": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer"},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    """Parse and schema-validate a config file; unknown keys are errors."""
    try:
        raw = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from e


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def resolve_data_path(path: str) -> Path:
    """Relative dataset paths fall back to the SPFT_DATA_DIR root."""
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    root = os.environ.get("SPFT_DATA_DIR")
    if root:
        candidate = Path(root) / p
        if candidate.exists():
            return candidate
    return p


def build_task(task_cfg: dict) -> TransferTaskPair:
    kind = task_cfg["kind"]
    per_class_train = task_cfg.get("per_class_train", 30)
    val_fraction = task_cfg.get("val_fraction", 0.2)
    split_seed = task_cfg.get("split_seed", 0)
    if kind == "synthetic":
        return generate_synthetic_pair(
            seed=task_cfg.get("seed", 0),
            dims=tuple(task_cfg.get("dims", [1, 10, 10])),
            source_k=task_cfg.get("source_k", 5),
            target_k=task_cfg.get("target_k", 5),
            shift=task_cfg.get("shift", 0.5),
            n_per_class=task_cfg.get("n_per_class", 200),
            noise=task_cfg.get("noise", 0.25),
            per_class_train=per_class_train,
            val_fraction=val_fraction,
        )
    if kind == "idx":
        if "images" not in task_cfg or "labels" not in task_cfg:
            raise ConfigError("config error at task.images: idx task needs images and labels paths")
        images = resolve_data_path(task_cfg["images"])
        labels = resolve_data_path(task_cfg["labels"])
        if not images.exists():
            raise ConfigError(f"config error at task.images: no such file {images}")
        if not labels.exists():
            raise ConfigError(f"config error at task.labels: no such file {labels}")
        base = load_idx(images, labels)
    else:  # digits
        base = render_digits(task_cfg.get("n_per_class", 400), task_cfg.get("seed", 0))
    return make_split_transfer(
        base,
        task_cfg.get("source_classes", [0, 1, 2, 3, 4]),
        task_cfg.get("target_classes", [5, 6, 7, 8, 9]),
        per_class_train, val_fraction, split_seed)


def build_arch(arch_cfg: dict | None, num_classes: int):
    if arch_cfg is None or arch_cfg.get("kind", "desknet") == "desknet":
        return desknet(num_classes)
    raise ConfigError("unknown architecture")


def build_train_config(train_cfg: dict, seed: int, mode_override: str | None = None) -> TrainConfig:
    es_cfg = train_cfg.get("early_stop")
    early = None
    if es_cfg is not None:
        early = EarlyStop(eval_every=es_cfg.get("eval_every", 100),
                          patience=es_cfg.get("patience", 10))
    return TrainConfig(
        base_lr=train_cfg["base_lr"],
        total_iters=train_cfg["total_iters"],
        decay_at=train_cfg["decay_at"],
        momentum=train_cfg.get("momentum", 0.9),
        decay_factor=train_cfg.get("decay_factor", 0.1),
        batch_size=train_cfg.get("batch_size", 64),
        mode=mode_override or train_cfg.get("mode", "SMOOTHED"),
        frozen_layers=train_cfg.get("frozen_layers", 0),
        early_stop=early,
        seed=seed,
    )
