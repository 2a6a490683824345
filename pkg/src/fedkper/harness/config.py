"""Experiment configuration: flat ``key = value`` files, CLI overrides, presets."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from ..errors import ConfigError
from ..fl import Strategy, TrainingConfig

OUTPUT_ROOT_ENV = "FEDKPER_OUTPUT_ROOT"


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "synthetic"
    classes: int = 8
    dim: int = 16
    per_class: int = 200
    spread: float = 1.0
    global_test_frac: float = 0.2
    # partition
    clients: int = 20
    alpha: float = 0.1
    min_per_client: int = 10
    local_test_frac: float = 0.2
    # protocol
    sample_fraction: float = 0.1
    rounds: int = 50
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 32
    max_grad_norm: float = 5.0
    lambda_cap: float = 10.0
    hidden: tuple[int, ...] = (64, 64)
    strategy: str = "fedkper"
    mu: float = 0.01
    strict_transmission: bool = False
    # harness
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        positive = ("classes", "dim", "per_class", "clients", "min_per_client", "rounds",
                    "batch_size", "workers", "lr", "max_grad_norm", "lambda_cap", "alpha")
        for key in positive:
            value = getattr(self, key)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"{key} must be positive, got {value}", key=key)
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", key="epochs")
        if self.spread < 0:
            raise ConfigError("spread must be >= 0", key="spread")
        if self.dataset == "synthetic" and (self.classes < 2 or self.dim < 2):
            raise ConfigError("synthetic data needs classes >= 2 and dim >= 2", key="classes")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError("sample_fraction must lie in (0, 1]", key="sample_fraction")
        for key in ("global_test_frac", "local_test_frac"):
            if not 0 < getattr(self, key) < 1:
                raise ConfigError(f"{key} must lie in (0, 1)", key=key)
        if not self.seeds:
            raise ConfigError("seeds must be non-empty", key="seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct", key="seeds")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative", key="seeds")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive", key="hidden")
        self.strategy_obj()

    def strategy_obj(self) -> Strategy:
        return Strategy.parse(self.strategy, default_mu=self.mu)

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            max_grad_norm=self.max_grad_norm,
            lambda_cap=self.lambda_cap,
            sample_fraction=self.sample_fraction,
            strict_transmission=self.strict_transmission,
            workers=self.workers,
        )

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "paper": {
        "rounds": 100,
        "epochs": 5,
        "lr": 0.01,
        "sample_fraction": 0.1,
        "alpha": 0.1,
    },
}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def coerce(key: str, raw) -> Any:
    """Convert a raw (usually string) value to the type of field ``key``."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown configuration key {key!r}", key=key)
    kind = _FIELD_TYPES[key]
    if not isinstance(raw, str):
        if kind.startswith("tuple"):
            return tuple(int(v) for v in raw)
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("tuple"):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}", key=key) from None
    return text


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}", key=key)
        values[key] = value.strip()
    return values


def parse_config(
    path=None, overrides: Mapping[str, Any] | None = None, preset: str | None = None, env=None
) -> ExperimentConfig:
    """Defaults, then preset, then file, then explicit overrides, then env."""
    merged: dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}", key="preset")
        merged.update(PRESETS[preset])
    if path is not None:
        merged.update({k: coerce(k, v) for k, v in read_config_file(path).items()})
    for key, value in (overrides or {}).items():
        merged[key] = coerce(key, value)
    env = os.environ if env is None else env
    if env.get(OUTPUT_ROOT_ENV):
        merged["output_dir"] = env[OUTPUT_ROOT_ENV]
    return ExperimentConfig(**merged)
