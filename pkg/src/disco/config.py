"""Experiment configuration: defaults, validation, canonical digest.

A config is a plain nested dict mirroring ``DEFAULTS``. Merging rejects
unknown keys (typos must fail loudly, not silently fall back) and checks
value types against the defaults. The digest is a 64-bit blake2b of the
canonical JSON encoding (sorted keys, no whitespace), so two configs are
interchangeable if and only if their digests agree.

The teacher digest covers only the sections that determine the teacher
checkpoint (data, teacher, contrastive, precision), so student-phase
settings and student seeds can vary while reusing one teacher.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

__all__ = ["ConfigError", "DEFAULTS", "default_config", "merge_config",
           "load_config", "save_config", "canonical_json", "config_digest",
           "teacher_digest", "validate_config"]


class ConfigError(ValueError):
    """Unknown key, wrong type, or semantically invalid value."""


DEFAULTS: dict = {
    "seed": 1,
    "precision": "f32",
    "data": {
        "classes": 10,
        "per_class": 500,
        "test_per_class": 100,
        "height": 24,
        "width": 24,
        "channels": 3,
        "recipe": "blobs",
        "transfer_recipe": "rings",
        "seed": 7,
        "crop_scale_min": 0.6,
        "crop_scale_max": 1.0,
        "flip_prob": 0.5,
        "noise_std": 0.02,
        "channel_jitter": 0.1,
    },
    "teacher": {
        "arch": "conv-large",
        "widths": [],
        "head_hidden": 512,
        "embed_dim": 128,
        "epochs": 60,
        "batch_size": 128,
        "lr": 0.06,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "schedule": "cosine",
        "seed": 1,
        "checkpoint_every": 10,
    },
    "student": {
        "arch": "conv-small",
        "widths": [],
        "head_hidden": 512,
        "embed_dim": 128,
    },
    "contrastive": {
        "temperature": 0.2,
        "queue_size": 1024,
        "ema_momentum": 0.999,
    },
    "disco": {
        "method": "disco",
        "lambda_dis": 1.0,
        "use_co": True,
        "use_dis": True,
        "normalize_before_mse": True,
        "distill_views": "query_only",
        "epochs": 30,
        "batch_size": 128,
        "lr": 0.06,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "schedule": "cosine",
        "checkpoint_every": 10,
    },
    "baselines": {
        "at_weight": 50.0,
        "rkd_dist_weight": 1.0,
        "rkd_angle_weight": 2.0,
        "huber_delta": 1.0,
        "seed_tau_s": 0.2,
        "seed_tau_t": 0.2,
    },
    "probe": {
        "epochs": 50,
        "lr": 0.3,
        "momentum": 0.0,
        "weight_decay": 0.0,
        "milestones": [0.6, 0.8],
        "decay_factor": 0.1,
        "fractions": [0.01, 0.1, 1.0],
        "kd_weight": 1.0,
        "kd_temperature": 4.0,
    },
    "mi": {
        "bins": 30,
        "range_policy": "per_unit",
        "layer": "repr",
    },
}

# Keys that may hold null (hidden layer absent).
_NULLABLE = {("student", "head_hidden"), ("teacher", "head_hidden")}

_METHODS = ("contrastive", "disco", "at", "rkd", "seed",
            "at+disco", "rkd+disco")


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, path: tuple) -> dict:
    out = {}
    for key, default_val in base.items():
        if key not in override:
            out[key] = copy.deepcopy(default_val)
            continue
        val = override[key]
        here = path + (key,)
        if isinstance(default_val, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{'.'.join(here)}: expected a section, got "
                                  f"{type(val).__name__}")
            out[key] = _merge(default_val, val, here)
        else:
            out[key] = _check_leaf(here, default_val, val)
    unknown = set(override) - set(base)
    if unknown:
        where = ".".join(path) or "top level"
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} at {where}")
    return out


def _check_leaf(path: tuple, default_val, val):
    if val is None:
        if path in _NULLABLE:
            return None
        raise ConfigError(f"{'.'.join(path)}: null is not allowed")
    if isinstance(default_val, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{'.'.join(path)}: expected bool")
        return val
    if isinstance(default_val, int) and not isinstance(default_val, bool):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{'.'.join(path)}: expected int")
        return val
    if isinstance(default_val, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{'.'.join(path)}: expected number")
        return float(val)
    if isinstance(default_val, str):
        if not isinstance(val, str):
            raise ConfigError(f"{'.'.join(path)}: expected string")
        return val
    if isinstance(default_val, list):
        if not isinstance(val, list):
            raise ConfigError(f"{'.'.join(path)}: expected list")
        return copy.deepcopy(val)
    raise ConfigError(f"{'.'.join(path)}: unsupported default type")


def validate_config(cfg: dict) -> None:
    """Semantic checks beyond shape/type."""
    c = cfg["contrastive"]
    if c["temperature"] <= 0:
        raise ConfigError("contrastive.temperature must be > 0")
    if c["queue_size"] < 1:
        raise ConfigError("contrastive.queue_size must be >= 1")
    if not 0.0 <= c["ema_momentum"] < 1.0:
        raise ConfigError("contrastive.ema_momentum must be in [0, 1)")
    d = cfg["disco"]
    if d["lambda_dis"] < 0:
        raise ConfigError("disco.lambda_dis must be >= 0")
    if not (d["use_co"] or d["use_dis"]):
        raise ConfigError("disco: at least one of use_co/use_dis must be true")
    if d["distill_views"] not in ("query_only", "both_views"):
        raise ConfigError("disco.distill_views must be query_only or both_views")
    if d["method"] not in _METHODS:
        raise ConfigError(f"disco.method must be one of {_METHODS}")
    b = cfg["baselines"]
    if b["seed_tau_s"] <= 0 or b["seed_tau_t"] <= 0:
        raise ConfigError("baselines.seed_tau_s/seed_tau_t must be > 0")
    p = cfg["probe"]
    ms = p["milestones"]
    if any(not 0.0 < m < 1.0 for m in ms) or list(ms) != sorted(ms):
        raise ConfigError("probe.milestones must be ascending fractions in (0, 1)")
    if any(not 0.0 < f <= 1.0 for f in p["fractions"]):
        raise ConfigError("probe.fractions must lie in (0, 1]")
    if cfg["mi"]["bins"] < 2:
        raise ConfigError("mi.bins must be >= 2")
    if cfg["mi"]["range_policy"] not in ("per_unit", "global"):
        raise ConfigError("mi.range_policy must be per_unit or global")
    if cfg["precision"] not in ("f32", "f64"):
        raise ConfigError("precision must be f32 or f64")
    dt = cfg["data"]
    if not 0.0 < dt["crop_scale_min"] <= dt["crop_scale_max"] <= 1.0:
        raise ConfigError("data.crop_scale_min/max must satisfy 0 < min <= max <= 1")
    for section, key in (("teacher", "epochs"), ("disco", "epochs"),
                         ("probe", "epochs")):
        if cfg[section][key] < 1:
            raise ConfigError(f"{section}.{key} must be >= 1")


def merge_config(overrides: dict | None = None) -> dict:
    cfg = _merge(DEFAULTS, overrides or {}, ())
    validate_config(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return merge_config(raw)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True, allow_nan=False)


def save_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")


def config_digest(cfg: dict) -> int:
    """64-bit digest of the full canonical config."""
    h = hashlib.blake2b(canonical_json(cfg).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def teacher_digest(cfg: dict) -> int:
    """Digest over the sections that pin down the teacher checkpoint."""
    sub = {k: cfg[k] for k in ("data", "teacher", "contrastive", "precision")}
    h = hashlib.blake2b(canonical_json(sub).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")
