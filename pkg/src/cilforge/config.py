"""Run configuration: JSON schema, defaults, overrides and resolution."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .datagen import StreamConfig, pooling_window
from .errors import ConfigError
from .losses import AgentConfig, Calibration, ReplayMode
from .seeding import derive_seed
from .trainer import SessionConfig

DEFAULTS = {
    "seed": 0,
    "stream": {
        "total_classes": 20,
        "base_classes": 2,
        "classes_per_task": 2,
        "train_clips_per_class": 30,
        "test_clips_per_class": 20,
        "frames_per_clip": 32,
        "channels": 3,
        "height": 8,
        "width": 8,
        "prototype_scale": 1.0,
        "motion_amplitude": 2.0,
        "noise_std": 5.0,
    },
    "model": {"embed_dim": 32, "hidden": 0},
    "train": {"epochs": 15, "lr": 1e-3, "batch_size": 12, "lambda": 0.5, "segments": 8},
    "replay": {
        "mode": "sc_agent",
        "calibration": "frozen",
        "alpha": 0.2,
        "uniform_value": 0.5,
        "ls_epsilon": 0.1,
    },
    "memory": {"per_class": 20, "multiplier": 1, "keyframes": 16, "gamma": 1.0},
    "input": {"delta": 0.5, "delta_everywhere": False},
    "output_dir": None,
}

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}


def _section(props):
    return {"type": "object", "additionalProperties": False, "properties": props}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "cilforge run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "stream": _section(
            {
                "total_classes": _POS_INT,
                "base_classes": _POS_INT,
                "classes_per_task": _POS_INT,
                "train_clips_per_class": _POS_INT,
                "test_clips_per_class": _POS_INT,
                "frames_per_clip": _POS_INT,
                "channels": _POS_INT,
                "height": _POS_INT,
                "width": _POS_INT,
                "prototype_scale": _NONNEG,
                "motion_amplitude": _NONNEG,
                "noise_std": _NONNEG,
            }
        ),
        "model": _section({"embed_dim": _POS_INT, "hidden": {"type": "integer", "minimum": 0}}),
        "train": _section(
            {
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _POS_INT,
                "lambda": {"type": "number", "minimum": 0, "maximum": 1},
                "segments": _POS_INT,
            }
        ),
        "replay": _section(
            {
                "mode": {"enum": [m.value for m in ReplayMode]},
                "calibration": {"enum": [c.value for c in Calibration]},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "uniform_value": {"type": "number", "minimum": 0, "maximum": 1},
                "ls_epsilon": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            }
        ),
        "memory": _section(
            {
                "per_class": _POS_INT,
                "multiplier": _POS_INT,
                "keyframes": _POS_INT,
                "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            }
        ),
        "input": _section(
            {
                "delta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "delta_everywhere": {"type": "boolean"},
            }
        ),
        "output_dir": {"type": ["string", "null"]},
    },
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(raw: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        lines = []
        for err in errors:
            where = ".".join(str(p) for p in err.path) or "<root>"
            lines.append(f"{where}: {err.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


def resolve(raw: dict | None = None) -> dict:
    """Validate a partial config and fill in every default."""
    raw = raw or {}
    validate(raw)
    cfg = _merge(DEFAULTS, raw)
    validate(cfg)
    # arithmetic checks the schema cannot express
    stream = stream_config(cfg)
    stream.validate()
    session_config(cfg)
    pooling_window(stream.height, stream.width, cfg["input"]["delta"])
    if cfg["memory"]["keyframes"] > stream.frames_per_clip:
        raise ConfigError(
            f"memory.keyframes ({cfg['memory']['keyframes']}) exceeds "
            f"stream.frames_per_clip ({stream.frames_per_clip})"
        )
    return cfg


def load(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def parse_override(text: str) -> tuple[list[str], object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.split("."), parsed


def apply_overrides(raw: dict, overrides) -> dict:
    out = copy.deepcopy(raw)
    for text in overrides or ():
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part} is not a section")
        node[path[-1]] = value
    return out


def set_task_count(raw: dict, tasks: int) -> dict:
    """Split the configured classes into ``tasks`` sessions.

    Incremental sessions get ``total // tasks`` classes each and the base
    session takes the remainder.
    """
    total = _merge(DEFAULTS, raw)["stream"]["total_classes"]
    tasks = int(tasks)
    if tasks < 2 or total // tasks < 1:
        raise ConfigError(f"cannot split {total} classes into {tasks} tasks")
    per_task = total // tasks
    stream = {"base_classes": total - (tasks - 1) * per_task, "classes_per_task": per_task}
    return _merge(raw, {"stream": stream})


def stream_config(cfg: dict) -> StreamConfig:
    return StreamConfig(**cfg["stream"], seed=derive_seed(cfg["seed"], "stream"))


def session_config(cfg: dict) -> SessionConfig:
    replay, train, memory = cfg["replay"], cfg["train"], cfg["memory"]
    agent = AgentConfig(
        alpha=replay["alpha"],
        calibration=replay["calibration"],
        uniform_value=replay["uniform_value"],
        ls_epsilon=replay["ls_epsilon"],
    )
    return SessionConfig(
        epochs=train["epochs"],
        lr=train["lr"],
        batch_size=train["batch_size"],
        lam=train["lambda"],
        mode=replay["mode"],
        agent=agent,
        delta=cfg["input"]["delta"],
        delta_everywhere=cfg["input"]["delta_everywhere"],
        keyframes=memory["keyframes"],
        gamma=memory["gamma"],
        per_class=memory["per_class"],
        multiplier=memory["multiplier"],
        segments=train["segments"],
        embed_dim=cfg["model"]["embed_dim"],
        hidden=cfg["model"]["hidden"],
        seed=cfg["seed"],
    )


def fingerprint(cfg: dict) -> str:
    """Short hash of the resolved config, ignoring where results are written."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
