"""Experiment configuration: a closed JSON schema plus typed accessors."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources

import jsonschema

from .attacks import MODES, parse_epsilon


class ConfigError(ValueError):
    """Schema violation or otherwise unusable configuration."""


_EPS = {"oneOf": [{"type": "string", "pattern": r"^\s*\d+\s*/\s*\d+\s*$"},
                  {"type": "number", "minimum": 0, "maximum": 1}]}

# closed interval [lo, hi] of percentage points
_RANGE = {"type": "array", "prefixItems": [{"type": "number"}, {"type": "number"}],
          "minItems": 2, "maxItems": 2}

_TRAIN = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "patience": {"type": ["integer", "null"], "minimum": 1},
    },
}

_DEFENSE = {
    "type": "object",
    "required": ["kind"],
    "properties": {"kind": {"enum": ["none", "sap", "dropout", "gaussian", "hrs", "advtrain"]}},
    "allOf": [
        {"if": {"properties": {"kind": {"const": "none"}}},
         "then": {"additionalProperties": False,
                  "properties": {"kind": {}, "name": {"type": "string"}}}},
        {"if": {"properties": {"kind": {"const": "sap"}}},
         "then": {"additionalProperties": False,
                  "properties": {"kind": {}, "name": {"type": "string"},
                                 "k": {"type": ["integer", "null"], "minimum": 1},
                                 "insert_at": {"type": "integer", "minimum": 0}}}},
        {"if": {"properties": {"kind": {"const": "dropout"}}},
         "then": {"additionalProperties": False, "required": ["rate"],
                  "properties": {"kind": {}, "name": {"type": "string"},
                                 "rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                                 "infer_rate": {"type": ["number", "null"], "minimum": 0,
                                                "exclusiveMaximum": 1},
                                 "insert_at": {"type": "integer", "minimum": 0}}}},
        {"if": {"properties": {"kind": {"const": "gaussian"}}},
         "then": {"additionalProperties": False, "required": ["sigma"],
                  "properties": {"kind": {}, "name": {"type": "string"},
                                 "sigma": {"type": "number", "minimum": 0},
                                 "sigma_inner": {"type": "number", "minimum": 0}}}},
        {"if": {"properties": {"kind": {"const": "hrs"}}},
         "then": {"additionalProperties": False, "required": ["channels"],
                  "properties": {"kind": {}, "name": {"type": "string"},
                                 "channels": {"type": "array", "minItems": 1,
                                              "items": {"type": "integer", "minimum": 1}},
                                 "split": {"type": "array",
                                           "items": {"type": "integer", "minimum": 1}}}}},
        {"if": {"properties": {"kind": {"const": "advtrain"}}},
         "then": {"additionalProperties": False, "required": ["epsilon"],
                  "properties": {"kind": {}, "name": {"type": "string"},
                                 "epsilon": _EPS,
                                 "iters": {"type": "integer", "minimum": 1}}}},
    ],
}

_ATTACK = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "epsilons"],
    "properties": {
        "kind": {"enum": ["fgsm", "pgd", "cw", "cwpgd"]},
        "epsilons": {"type": "array", "minItems": 1, "items": _EPS},
        "iters": {"type": "integer", "minimum": 0},
        "alpha": {"oneOf": [_EPS, {"type": "null"}]},
        "kappa": {"type": "number", "minimum": 0},
        "mode": {"enum": list(MODES)},
        "eot_n": {"type": "integer", "minimum": 1},
        "c_search": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}},
        "cw_iters": {"type": "integer", "minimum": 0},
        "cw_lr": {"type": "number", "exclusiveMinimum": 0},
    },
}

_DATASET = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["mnist", "idx", "synthetic"]},
        "train": {"type": "integer", "minimum": 1},
        "test": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "train_images": {"type": "string"},
        "train_labels": {"type": "string"},
        "test_images": {"type": "string"},
        "test_labels": {"type": "string"},
        "classes": {"type": "integer", "minimum": 2},
        "hw": {"type": "integer", "minimum": 4},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "defenses"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "output": {"type": "string"},
        "cache": {"type": ["string", "null"]},
        "workers": {"type": "integer", "minimum": 1},
        "dataset": _DATASET,
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["mlp", "cnn"]},
                "hidden": {"type": "integer", "minimum": 1},
                "train": _TRAIN,
            },
        },
        "defenses": {"type": "array", "items": _DEFENSE},
        "attacks": {"type": "array", "items": _ATTACK},
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "examples": {"type": "integer", "minimum": 1},
                "votes": {"type": "integer", "minimum": 1},
            },
        },
        "des": {
            "type": "object",
            "additionalProperties": False,
            "required": ["attack", "epsilon"],
            "properties": {
                "attack": {"enum": ["fgsm", "pgd", "cw", "cwpgd"]},
                "epsilon": _EPS,
                "mode": {"enum": list(MODES)},
                "delta_d_range": _RANGE,
                "delta_t_range": _RANGE,
            },
        },
        "gradstd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "examples": {"type": "integer", "minimum": 1},
                "samples": {"type": "integer", "minimum": 2},
            },
        },
        "reprogram": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "task_a": _DATASET,
                "kernels": {"type": "array", "minItems": 1,
                            "items": {"type": "integer", "minimum": 1}},
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


def _where(err):
    path = "/".join(str(p) for p in err.absolute_path)
    return path or "<root>"


def validate(cfg):
    """Raise :class:`ConfigError` naming the first offending field."""
    errors = sorted(_VALIDATOR.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        # report the most specific failure
        err = max(errors, key=lambda e: len(e.absolute_path))
        leaf = err
        while leaf.context:
            leaf = max(leaf.context, key=lambda e: len(e.absolute_path))
        raise ConfigError(f"{_where(leaf)}: {leaf.message}")
    for i, a in enumerate(cfg.get("attacks", [])):
        for e in a["epsilons"]:
            _check_eps(e, f"attacks/{i}/epsilons")
    for i, d in enumerate(cfg.get("defenses", [])):
        if "epsilon" in d:
            _check_eps(d["epsilon"], f"defenses/{i}/epsilon")
    if "epsilon" in cfg.get("des", {}):
        _check_eps(cfg["des"]["epsilon"], "des/epsilon")
    return cfg


def _check_eps(value, where):
    try:
        eps = parse_epsilon(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if not 0.0 <= eps <= 1.0:
        raise ConfigError(f"{where}: epsilon {value!r} outside [0, 1]")


def load(path):
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return validate(cfg)


def bundled(name):
    """A preset config shipped with the package, e.g. ``table1-desk``."""
    try:
        text = resources.files("hrslab.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"no bundled preset named {name!r}") from None
    return validate(json.loads(text))


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("hrslab.presets").iterdir()
                  if p.name.endswith(".json"))


def canonical(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    # output location and caching never change results
    core = {k: v for k, v in cfg.items() if k not in ("output", "cache", "workers")}
    return hashlib.sha256(canonical(core).encode()).hexdigest()


def with_seed(cfg, seed):
    out = copy.deepcopy(cfg)
    out["seed"] = int(seed)
    return validate(out)
