"""Experiment configuration: a versioned JSON document, validated before any work.

Unknown keys anywhere are errors.  Missing keys take the defaults below.
"""

import copy
import json

import jsonschema

from .attacks import KINDS
from .defense import METHODS
from .errors import UsageError

SCHEMA_VERSION = 1

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}

_DEFENSE_PARAMS = {
    "lam": {"type": "number", "minimum": 0},
    "eta": {"type": "number", "minimum": 0},
    "tau": {"type": "number", "minimum": 0},
    "T": _NONNEG_INT,
    "alpha": {"type": "number", "exclusiveMinimum": 0},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "mu": {"type": "number", "minimum": 0},
    "n_vt": _NONNEG_INT,
    "beta_vt": {"type": "number", "minimum": 0},
    "box_eps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
}

_ATTACK = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(KINDS)},
        "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "epochs": _NONNEG_INT,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": _POS_INT,
        "hidden": _POS_INT,
        "margin": _NUM,
        "c": {"type": "number", "minimum": 0},
        "target": {"type": ["integer", "null"], "minimum": 0},
        "steps": _NONNEG_INT,
        "step_size": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "min_asr": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version"],
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["strokes", "blobs", "mnist-idx"]},
                "per_class": _POS_INT,
                "n_classes": {"type": "integer", "minimum": 2},
                "split": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "limit": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "classifier": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": _POS_INT},
                "activation": {"enum": ["relu", "tanh", "sigmoid"]},
                "epochs": _NONNEG_INT,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _POS_INT,
                "min_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "attacks": {
            "type": "object",
            "minProperties": 1,
            "propertyNames": {"pattern": "^[A-Za-z0-9_.-]+$"},
            "additionalProperties": _ATTACK,
        },
        "defense": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"type": "string"},
                "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1, "uniqueItems": True},
                **_DEFENSE_PARAMS,
                "overrides": {
                    "type": "object",
                    "propertyNames": {"enum": list(METHODS)},
                    "additionalProperties": {"type": "object", "additionalProperties": False, "properties": _DEFENSE_PARAMS},
                },
            },
        },
        "evaluate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_eval": _POS_INT,
                "batch_size": _POS_INT,
                "uiqi_window": _POS_INT,
                "uiqi_stride": _POS_INT,
            },
        },
        "ablate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": list(METHODS)},
                "param": {"enum": ["T", "tau", "alpha"]},
                "values": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            },
        },
    },
}

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "data": {"source": "strokes", "per_class": 400, "n_classes": 10, "split": [0.7, 0.1, 0.2], "limit": None},
    "classifier": {
        "hidden": [256, 128],
        "activation": "relu",
        "epochs": 20,
        "lr": 1e-3,
        "batch_size": 64,
        "min_accuracy": 0.97,
    },
    "attacks": {
        "generator": {"kind": "perturb-generator"},
        "universal": {"kind": "universal-perturbation"},
        "autoencoder": {"kind": "targeted-autoencoder", "target": 0},
        "iterative": {"kind": "iterative-sign"},
    },
    "defense": {
        "source": "generator",
        "methods": ["GSD", "OPT", "MGSD", "PM-MGSD", "VT-MGSD"],
        "lam": 0.1,
        "eta": 10.0,
        "tau": 64.0,
        "T": 5,
        "alpha": 48.0,
        "lr": 1e-3,
        "mu": 1.0,
        "n_vt": 20,
        "beta_vt": 1.5,
        "box_eps": 0.05,
        "overrides": {"OPT": {"T": 1000}},
    },
    "evaluate": {"n_eval": 256, "batch_size": 256, "uiqi_window": 8, "uiqi_stride": 1},
    "ablate": {"method": "VT-MGSD", "param": "T", "values": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]},
}

ATTACK_DEFAULTS = {
    "perturb-generator": {"epsilon": 0.3, "epochs": 10, "lr": 1e-3, "batch_size": 64, "hidden": 256, "margin": 5.0, "c": 0.1, "min_asr": 0.8},
    "targeted-autoencoder": {"epsilon": 0.3, "epochs": 10, "lr": 1e-3, "batch_size": 64, "hidden": 128, "c": 0.1, "target": 0, "min_asr": 0.6},
    "universal-perturbation": {"epsilon": 0.3, "epochs": 5, "batch_size": 64, "step_size": None, "min_asr": 0.5},
    "iterative-sign": {"epsilon": 0.3, "steps": 10, "step_size": None},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "attacks":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc):
    """Check ``doc`` against the schema; raises :class:`UsageError` naming the offending path."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"invalid config at {where}: {exc.message}") from None


def resolve(doc, seed=None):
    """Validate, fill defaults and cross-check; returns a new plain dict."""
    validate(doc)
    cfg = _merge(DEFAULTS, doc)
    cfg["attacks"] = {name: {**ATTACK_DEFAULTS[a["kind"]], **a} for name, a in cfg["attacks"].items()}
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise UsageError(f"seed must be an unsigned 64-bit integer, got {seed}")
        cfg["seed"] = int(seed)
    validate(cfg)
    src = cfg["defense"]["source"]
    if src not in cfg["attacks"]:
        raise UsageError(f"defense source {src!r} is not among the configured attacks")
    if cfg["attacks"][src]["kind"] == "iterative-sign":
        raise UsageError(f"defense source {src!r} is an iterative-sign attack, which cannot be differentiated")
    if abs(sum(cfg["data"]["split"]) - 1.0) > 1e-9:
        raise UsageError("data/split must sum to 1")
    if cfg["data"]["source"] == "mnist-idx" and not ("images" in cfg["data"] and "labels" in cfg["data"]):
        raise UsageError("data/source mnist-idx needs data/images and data/labels paths")
    values = cfg["ablate"]["values"]
    if any(b <= a for a, b in zip(values, values[1:])):
        raise UsageError("ablate/values must be strictly ascending")
    for name, a in cfg["attacks"].items():
        if a["kind"] == "targeted-autoencoder" and a.get("target") is None:
            raise UsageError(f"attack {name!r} is targeted and needs a target label")
        if a.get("target") is not None and a["target"] >= cfg["data"]["n_classes"]:
            raise UsageError(f"attack {name!r} targets class {a['target']} outside {cfg['data']['n_classes']} classes")
    return cfg


def load(path, seed=None):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None
    return resolve(doc, seed)


def defense_params(cfg, method):
    """Keyword arguments for :class:`~immunekit.defense.ImmuneConfig` for one method."""
    d = cfg["defense"]
    params = {k: d[k] for k in _DEFENSE_PARAMS}
    params.update(d.get("overrides", {}).get(method, {}))
    return dict(params, method=method)
