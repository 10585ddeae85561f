"""Experiment configuration: schema validation, presets, and overrides.

A configuration is a single JSON document validated against a strict
schema (unknown keys rejected) before any work starts.  Values can be
overridden from the command line with dotted --set paths, e.g.
``--set training.epochs=1`` or ``--set road.seeds=[7,8]``.
"""

from __future__ import annotations

import copy
import json
from importlib import resources

import jsonschema

from .cells import CellKind
from .io_utils import sha256_text
from .training import TrainingConfig

CONFIG_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration document or override."""


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": [
        "format_version",
        "kind",
        "m",
        "n",
        "dt",
        "out_dir",
        "road",
        "dataset",
        "training",
        "eval",
    ],
    "properties": {
        "format_version": {"const": CONFIG_FORMAT_VERSION},
        "kind": {"enum": [k.value for k in CellKind]},
        "m": {"type": "integer", "minimum": 1},
        "n": {"type": "integer", "minimum": 1},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "out_dir": {"type": "string", "minLength": 1},
        "road": {
            "type": "object",
            "additionalProperties": False,
            "required": ["seeds", "eval_seed", "length", "kappa_max", "smoothness", "seasons"],
            "properties": {
                "seeds": {
                    "type": "array",
                    "items": {"type": "integer"},
                    "minItems": 1,
                },
                "eval_seed": {"type": "integer"},
                "length": {"type": "number", "minimum": 10},
                "kappa_max": {"type": "number", "exclusiveMinimum": 0},
                "smoothness": {"type": "number", "exclusiveMinimum": 0},
                "seasons": {
                    "type": "array",
                    "items": {"enum": ["summer", "winter"]},
                    "minItems": 1,
                    "uniqueItems": True,
                },
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["window", "stride", "start_offsets"],
            "properties": {
                "window": {"type": "integer", "minimum": 2},
                "stride": {"type": "integer", "minimum": 1},
                "start_offsets": {
                    "type": "array",
                    "items": {"type": "number"},
                    "minItems": 1,
                },
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "required": [
                "epochs",
                "batch_size",
                "sequence_length",
                "learning_rate",
                "weight_decay",
                "adam_beta1",
                "adam_beta2",
                "adam_eps",
                "seed",
                "clip_norm",
                "compute_dtype",
            ],
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "sequence_length": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "adam_beta1": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "adam_beta2": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "adam_eps": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
                "clip_norm": {"type": "number", "minimum": 0},
                "compute_dtype": {"enum": ["float32", "float64"]},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "required": ["noise_variances", "ssim_frames", "rollout_seed", "saliency_samples"],
            "properties": {
                "noise_variances": {
                    "type": "array",
                    "items": {"type": "number", "minimum": 0},
                    "minItems": 1,
                },
                "ssim_frames": {"type": "integer", "minimum": 1},
                "rollout_seed": {"type": "integer"},
                "saliency_samples": {"type": "integer", "minimum": 0},
            },
        },
    },
}


def validate_config(config: dict) -> dict:
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {err.message}") from err
    if config["dataset"]["window"] != config["training"]["sequence_length"]:
        raise ConfigError(
            "dataset/window must equal training/sequence_length "
            f"({config['dataset']['window']} vs {config['training']['sequence_length']})"
        )
    return config


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from err
    return validate_config(config)


def load_preset(name: str) -> dict:
    """Shipped configuration preset ("desk" or "paper")."""
    try:
        text = resources.files("liquidlane").joinpath(f"presets/{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
    return validate_config(json.loads(text))


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form KEY=VALUE")
    key, raw = item.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise ConfigError(f"override {item!r} has an empty key segment")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(config: dict, overrides) -> dict:
    """New config with dotted KEY=VALUE overrides applied and re-validated."""
    config = copy.deepcopy(config)
    for item in overrides or []:
        path, value = _parse_override(item)
        node = config
        for segment in path[:-1]:
            if not isinstance(node, dict) or segment not in node:
                raise ConfigError(f"override {item!r}: no such key {segment!r}")
            node = node[segment]
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {path[-2]!r} is not an object")
        node[path[-1]] = value
    return validate_config(config)


def config_hash(config: dict) -> str:
    return sha256_text(json.dumps(config, sort_keys=True, separators=(",", ":")))


def training_config(config: dict) -> TrainingConfig:
    return TrainingConfig(**config["training"])
