"""Experiment configuration: one human-readable YAML file, schema-validated,
with dotted-key overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigurationError

DEFAULTS = {
    "seeds": [0, 1, 2, 3, 4],
    "paths": {"dataset_dir": "data/default", "out_dir": "out"},
    "scm": {
        "seed": 13,
        "tuned": True,
        "d_s": 2, "d_v": 2, "d_z": 2,
        "d_x": 16, "d_A": 4, "d_B": 4, "T": 6,
        "sigma_x": 0.05, "sigma_A": 0.02,
        "y_scale": 2.0,
        "obs_kind": "vector",
        "counts": {"train": 300, "val": 100, "test": 107},
    },
    "model": {
        "kind": "causal_hmm",
        "d_s": 2, "d_v": 2, "d_z": 2,
        "rnn_hidden": 32, "enc_hidden": 128, "enc_depth": 3,
        "attr_hidden": 32, "dec_hidden": 128, "conv_channels": 16,
        "n_mc": 8,
    },
    "train": {
        "epochs": 300, "batch_size": 64, "lr": 1e-3, "clip_norm": 5.0,
        "patience": 300, "n_mc_train": 8, "n_mc_eval": 64,
        "warmup_epochs": 100,
    },
    "eval": {
        "windows": "all",
        "probe": {"epochs": 400, "lr": 0.05, "seed": 0},
        "align": {"penalty": 1e-4, "split": "train"},
        "saliency": {"blocks": ["s", "z"], "step": "last"},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dataset_dir": {"type": "string"},
                "out_dir": {"type": "string"},
            },
            "required": ["dataset_dir", "out_dir"],
        },
        "scm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer"},
                "tuned": {"type": "boolean"},
                "d_s": {"type": "integer", "minimum": 1},
                "d_v": {"type": "integer", "minimum": 1},
                "d_z": {"type": "integer", "minimum": 1},
                "d_x": {"type": "integer", "minimum": 1},
                "d_A": {"type": "integer", "minimum": 1},
                "d_B": {"type": "integer", "minimum": 1},
                "T": {"type": "integer", "minimum": 2},
                "sigma_x": {"type": "number", "minimum": 0},
                "sigma_A": {"type": "number", "minimum": 0},
                "y_scale": {"type": "number"},
                "obs_kind": {"enum": ["vector", "image"]},
                "counts": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "train": {"type": "integer", "minimum": 1},
                        "val": {"type": "integer", "minimum": 1},
                        "test": {"type": "integer", "minimum": 0},
                    },
                    "required": ["train", "val", "test"],
                },
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["causal_hmm", "feedforward", "recurrent",
                                  "seq_vae", "seq_vae_att"]},
                "d_s": {"type": "integer", "minimum": 1},
                "d_v": {"type": "integer", "minimum": 1},
                "d_z": {"type": "integer", "minimum": 1},
                "rnn_hidden": {"type": "integer", "minimum": 1},
                "enc_hidden": {"type": "integer", "minimum": 1},
                "enc_depth": {"type": "integer", "minimum": 1},
                "attr_hidden": {"type": "integer", "minimum": 1},
                "dec_hidden": {"type": "integer", "minimum": 1},
                "conv_channels": {"type": "integer", "minimum": 1},
                "n_mc": {"type": "integer", "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "minimum": 0},
                "clip_norm": {"type": "number", "exclusiveMinimum": 0},
                "patience": {"type": "integer", "minimum": 1},
                "n_mc_train": {"type": "integer", "minimum": 1},
                "n_mc_eval": {"type": "integer", "minimum": 1},
                "warmup_epochs": {"type": "integer", "minimum": 0},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "windows": {
                    "anyOf": [
                        {"enum": ["all"]},
                        {"type": "array",
                         "items": {"type": "array", "items": {"type": "integer"},
                                   "minItems": 2, "maxItems": 2}},
                    ]
                },
                "probe": {"type": "object"},
                "align": {"type": "object"},
                "saliency": {"type": "object"},
            },
        },
    },
    "required": ["paths"],
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg: dict, dotted: str):
    """Apply one ``key.path=value`` override; value parsed as YAML."""
    if "=" not in dotted:
        raise ConfigurationError(f"override {dotted!r} must look like key=value")
    key, raw = dotted.split("=", 1)
    value = yaml.safe_load(raw)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def load_config(path: str | Path, overrides: tuple[str, ...] = ()) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"config is not valid YAML: {e}") from e
    cfg = _deep_merge(DEFAULTS, raw)
    for ov in overrides:
        apply_override(cfg, ov)
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigurationError(f"config invalid at {where}: {e.message}") from e
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
