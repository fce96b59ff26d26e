"""JSON run configuration with dotted-key overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterable

from .losses import LossSpec
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "dataset": {"path": None, "format": "bert4rec-txt", "kcore": None},
    "split": {"n_validation_users": 512, "seed": 0},
    "model": asdict(ModelConfig()),
    "loss": {"kind": "gbce", "k": 256, "t": 0.75},
    "train": asdict(TrainConfig()),
    "eval": {"cutoffs": [1, 10], "exclude_seen": True, "k_max": 100},
    "sweep": {"k": [1, 4, 16, 64, 256], "t": [0.0, 0.25, 0.5, 0.75, 1.0]},
    "output_dir": "runs/default",
}


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for i, part in enumerate(parts):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key: {'.'.join(parts[:i + 1])}")
            if i == len(parts) - 1:
                node[part] = _parse_value(raw)
            else:
                node = node[part]
    return cfg


def load_config(path=None, overrides: Iterable[str] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, json.loads(Path(path).read_text(encoding="utf-8")))
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        model_config(cfg)
        loss_spec(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg["eval"]["cutoffs"]:
        raise ConfigError("eval.cutoffs must be non-empty")


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def loss_spec(cfg: dict) -> LossSpec:
    return LossSpec(kind=cfg["loss"]["kind"], k=int(cfg["loss"]["k"]), t=float(cfg["loss"]["t"]))


def train_config(cfg: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg["train"].items() if k in known})
