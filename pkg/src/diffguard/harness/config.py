"""Experiment configuration: JSON schema, validation and canonical hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

SCHEMA_VERSION = 1

KINDS = (
    "train-denoiser", "train-classifier", "attack", "purify", "evaluate",
    "certify", "bounds", "ablate-eta", "ablate-respace", "ablate-start",
)
# kinds that apply trained models and therefore need both checkpoints
MODEL_KINDS = ("attack", "purify", "evaluate", "certify", "ablate-eta", "ablate-respace", "ablate-start")

_pos_int = {"type": "integer", "minimum": 1}
_nonneg = {"type": "number", "minimum": 0}
_prob = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}

_dataset = {
    "type": "object",
    "required": ["name", "seed"],
    "properties": {
        "name": {"enum": ["digits8", "blobs", "moons"]},
        "seed": {"type": "integer"},
        "n_per_class": _pos_int,
        "num_classes": {"type": "integer", "minimum": 2},
        "d": {"type": "integer", "minimum": 2},
        "separation": _nonneg,
        "noise_sigma": _nonneg,
        "n": {"type": "integer", "minimum": 2},
    },
    "additionalProperties": False,
}

_network = {
    "type": "object",
    "properties": {
        "hidden": {"type": "array", "items": _pos_int},
        "time_embedding_dim": {"type": "integer", "minimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": _pos_int,
    },
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "required": ["schema_version", "kind", "seed"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"enum": list(KINDS)},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "threads": _pos_int,
        "dataset": _dataset,
        "eval_dataset": _dataset,
        "num_examples": _pos_int,
        "schedule": {
            "type": "object",
            "properties": {
                "T": _pos_int,
                "beta_start": {"type": "number"},
                "beta_end": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "denoiser": _network,
        "classifier": _network,
        "checkpoints": {
            "type": "object",
            "required": ["denoiser", "classifier"],
            "properties": {"denoiser": {"type": "string"}, "classifier": {"type": "string"}},
            "additionalProperties": False,
        },
        "purify": {
            "type": ["object", "null"],
            "required": ["T"],
            "properties": {
                "T": _pos_int,
                "M": _pos_int,
                "guidance_a": _nonneg,
                "perturbation_bound_r": {"type": "number", "exclusiveMinimum": 0},
                "eta": _nonneg,
                "respace_steps": {"type": ["integer", "null"], "minimum": 1},
                "start_from_noise": {"type": "boolean"},
                "clamp_output": {"type": "boolean"},
                "guided": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "attack": {
            "type": ["object", "null"],
            "properties": {
                "norm": {"enum": ["linf", "l2"]},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "steps": _pos_int,
                "step_size": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "random_start": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "certify": {
            "type": "object",
            "properties": {
                "n0": _pos_int,
                "n": _pos_int,
                "alpha": _prob,
                "radii": {"type": "array", "items": _nonneg, "minItems": 1},
                "batch_size": _pos_int,
                "probe": {
                    "type": ["object", "null"],
                    "properties": {
                        "directions": _pos_int,
                        "draws": _pos_int,
                        "fraction": {"type": "number", "exclusiveMinimum": 0},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "bounds": {
            "type": "object",
            "properties": {
                "epsilons": {"type": "array", "items": _nonneg, "minItems": 1},
                "radii": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "alpha_bars": {"type": "array", "items": _prob, "minItems": 1},
                "T_values": {"type": "array", "items": _pos_int, "minItems": 1},
                "n_samples": {"type": "integer", "minimum": 1000},
                "d": _pos_int,
            },
            "additionalProperties": False,
        },
        "ablation": {
            "type": "object",
            "properties": {
                "etas": {"type": "array", "items": _nonneg, "minItems": 1},
                "trend_etas": {"type": "array", "items": _nonneg, "minItems": 2},
                "respace_steps": {"type": "array", "items": _pos_int, "minItems": 1},
                "jitter": _nonneg,
                "collapse_drop": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "threads": 1,
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "denoiser": {"hidden": [256, 256], "time_embedding_dim": 8, "epochs": 3000, "lr": 0.1, "batch_size": 64},
    "classifier": {"hidden": [32], "time_embedding_dim": 0, "epochs": 20, "lr": 0.1, "batch_size": 32},
    "attack": {"norm": "linf", "epsilon": 8.0 / 255.0, "steps": 40, "step_size": None, "random_start": True},
    "certify": {
        "n0": 20, "n": 1000, "alpha": 0.001, "radii": [0.0, 0.25, 0.5, 0.75, 1.0],
        "batch_size": 1000, "probe": None,
    },
    "bounds": {
        "epsilons": [0.1, 0.25, 0.5, 1.0, 2.0],
        "radii": [0.25, 0.5, 0.75, 1.0],
        "alpha_bars": [0.1, 0.3, 0.5, 0.65, 0.9],
        "n_samples": 1_000_000,
        "d": 1,
    },
    "ablation": {
        "etas": [0.0, 0.1, 0.2, 0.5, 1.0],
        "trend_etas": [0.0, 0.5, 1.0],
        "respace_steps": [2, 5, 10, 25, 50, 100],
        "jitter": 0.02,
        "collapse_drop": 0.2,
    },
    "num_examples": 500,
}

# sections whose absence means "disabled" rather than "use defaults"
_NULLABLE = ("attack", "purify")
# fields that affect where or how fast a run happens but not what it computes
_UNHASHED = ("output_dir", "threads")


class ConfigError(ValueError):
    """Schema or semantic violation; ``field`` is a dotted path into the document."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


def _field_path(err) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        path = f"{path}.{missing}" if path else missing
    if err.validator == "additionalProperties":
        extra = err.message.split("'")[1] if "'" in err.message else ""
        path = f"{path}.{extra}" if path else extra
    return path


def validate(doc: dict) -> dict:
    """Check ``doc`` against the schema and return it with defaults filled in."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(_field_path(err), err.message)
    cfg = copy.deepcopy(doc)
    for key, default in DEFAULTS.items():
        if key in _NULLABLE and key in cfg and cfg[key] is None:
            continue
        if key not in cfg:
            if key in _NULLABLE:
                continue
            cfg[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            merged = copy.deepcopy(default)
            merged.update(cfg[key])
            cfg[key] = merged
    if "purify" in cfg and cfg["purify"] is not None and cfg["purify"].get("T", 0) > cfg["schedule"]["T"]:
        raise ConfigError("purify.T", f"{cfg['purify']['T']} exceeds schedule.T={cfg['schedule']['T']}")
    radii = cfg["certify"]["radii"]
    if any(b < a for a, b in zip(radii, radii[1:])):
        raise ConfigError("certify.radii", "radius grid must be ascending")
    needs_data = cfg["kind"] not in ("bounds",)
    if needs_data and "dataset" not in cfg:
        raise ConfigError("dataset", f"required for kind {cfg['kind']!r}")
    if cfg["kind"] in MODEL_KINDS and "checkpoints" not in cfg:
        raise ConfigError("checkpoints", f"required for kind {cfg['kind']!r}")
    if cfg["kind"] in ("ablate-eta", "ablate-respace", "ablate-start", "purify") and cfg.get("purify") is None:
        raise ConfigError("purify", f"required for kind {cfg['kind']!r}")
    if cfg["kind"].startswith("ablate") and cfg.get("attack") is None:
        raise ConfigError("attack", "ablations measure robust accuracy and need an attack")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("", "top level must be a JSON object")
    cfg = validate(doc)
    cfg["_base_dir"] = str(path.resolve().parent)
    return cfg


def canonical_json(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in _UNHASHED and not k.startswith("_")}
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def content_hash(data: bytes) -> str:
    """Git blob hash: sha1 over ``b"blob <len>\\0" + data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def config_hash(cfg: dict) -> str:
    return content_hash(canonical_json(cfg).encode())
