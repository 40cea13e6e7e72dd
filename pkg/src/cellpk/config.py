"""Flat ``key = value`` run configuration.

Training keys mirror the hyperparameter table (learning_rate, epochs,
batch_size, early_stopping_patience, optimizer, split); the rest are run-level
settings. Unknown keys are rejected. Command-line flags override file values.
"""

from __future__ import annotations

import os
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping

from .models import presets
from .nn.train import TrainConfig

__all__ = ["TRAIN_KEYS", "RUN_KEYS", "ConfigError", "parse_split", "load_config", "resolve_train_config", "train_config_items", "format_config"]

TRAIN_KEYS = ("learning_rate", "epochs", "batch_size", "early_stopping_patience", "optimizer", "split")
RUN_KEYS = ("seed", "image_size", "workers", "model", "preset", "manifest", "out")


class ConfigError(ValueError):
    pass


def parse_split(text: str | float) -> float:
    """``"80/20"`` -> 0.8; ``"0.95"`` -> 0.95."""
    if isinstance(text, (int, float)):
        frac = float(text)
    elif "/" in text:
        a, _, b = text.partition("/")
        try:
            a, b = float(a), float(b)
        except ValueError:
            raise ConfigError(f"bad split {text!r}; use e.g. 80/20")
        if a <= 0 or b <= 0:
            raise ConfigError(f"bad split {text!r}; both sides must be positive")
        frac = a / (a + b)
    else:
        try:
            frac = float(text)
        except ValueError:
            raise ConfigError(f"bad split {text!r}; use e.g. 80/20")
    if not 0.0 < frac < 1.0:
        raise ConfigError(f"split {text!r} must leave both sides non-empty")
    return frac


def load_config(path: str | os.PathLike) -> dict[str, str]:
    path = Path(path)
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = (s.strip() for s in line.partition("="))
        if key not in TRAIN_KEYS + RUN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: key {key!r} given twice")
        out[key] = value
    return out


def resolve_train_config(preset: str, overrides: Mapping[str, Any], seed: int | None = None) -> TrainConfig:
    """Start from a named preset and apply table-style overrides (None values are ignored)."""
    table = presets()
    if preset not in table:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(table)}")
    cfg = table[preset]
    changes: dict[str, Any] = {}
    mapping = {
        "learning_rate": ("learning_rate", float),
        "epochs": ("max_epochs", int),
        "batch_size": ("batch_size", int),
        "early_stopping_patience": ("early_stop_patience", int),
        "optimizer": ("optimizer", str),
        "split": ("train_fraction", parse_split),
    }
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in mapping:
            raise ConfigError(f"unknown training key {key!r}")
        field_name, conv = mapping[key]
        try:
            changes[field_name] = conv(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})")
    if seed is not None:
        changes["seed"] = int(seed)
    try:
        return replace(cfg, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc))


def train_config_items(cfg: TrainConfig) -> dict[str, Any]:
    """A TrainConfig expressed in config-file keys."""
    return {
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.max_epochs,
        "batch_size": cfg.batch_size,
        "early_stopping_patience": cfg.early_stop_patience,
        "optimizer": cfg.optimizer,
        "split": f"{cfg.train_fraction * 100:g}/{100 - cfg.train_fraction * 100:g}",
        "seed": cfg.seed,
    }


def format_config(values: Mapping[str, Any]) -> str:
    return "\n".join(f"{k} = {v}" for k, v in values.items())
