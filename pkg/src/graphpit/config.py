"""Run configuration: a flat JSON object of named fields on top of a preset.

A config file may name a ``preset`` ("desk" or "paper") and override any
field. Unknown fields and out-of-range values raise ConfigError naming the
offending field. The GPIT_SEED environment variable overrides ``seed``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .geometry import GraphPriorConfig
from .losses import LossConfig
from .model import ModelConfig
from .synth import SynthConfig

SEED_ENV = "GPIT_SEED"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class RunConfig:
    # model dims
    n_max: int = 6
    tokens_per_part: int = 4
    dim: int = 32
    n_layers: int = 2
    width: int = 32
    key_dim: int = 32
    n_blocks: int = 4
    time_dim: int = 16
    # adjacency rule
    tau_iou: float = 0.0
    tau_dist: float = 512.0
    iou_strict: bool = True
    # loss weights
    lambda_g: float = 1.0
    lambda_r: float = 1.0
    neg_fraction: float = 1.0
    # optimiser
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # schedule
    steps: int = 4000
    batch_size: int = 32
    grad_accum: int = 1
    ckpt_every: int = 1000
    # data
    seed: int = 0
    dataset_size: int = 2000
    dataset_seed: int = 1000
    n_min: int = 4
    size_min: float = 250.0
    size_max: float = 360.0
    token_noise: float = 0.01
    # evaluation
    eval_size: int = 100
    eval_seed: int = 99999
    sample_steps: int = 32
    ablate_seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs/desk"
    preset: str = "desk"

    def __post_init__(self):
        positive = ("n_max", "tokens_per_part", "dim", "width", "key_dim", "n_blocks", "time_dim",
                    "steps", "batch_size", "grad_accum", "ckpt_every", "dataset_size", "eval_size",
                    "sample_steps", "n_min", "size_min", "size_max", "tau_dist", "lr", "adam_eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)!r}")
        for name in ("n_layers", "lambda_g", "lambda_r", "token_noise", "tau_iou"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)!r}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(name, "must lie in [0, 1)")
        if not 0 < self.neg_fraction <= 1:
            raise ConfigError("neg_fraction", "must lie in (0, 1]")
        if self.n_min > self.n_max:
            raise ConfigError("n_min", f"exceeds n_max={self.n_max}")
        if self.size_min > self.size_max:
            raise ConfigError("size_min", "exceeds size_max")
        if self.time_dim % 2:
            raise ConfigError("time_dim", "must be even")
        if not self.ablate_seeds:
            raise ConfigError("ablate_seeds", "needs at least one seed")

    # views consumed by the library modules

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.n_max, self.tokens_per_part, self.dim, self.n_layers, self.width,
                           self.key_dim, self.n_blocks, self.time_dim)

    @property
    def graph(self) -> GraphPriorConfig:
        return GraphPriorConfig(self.tau_iou, self.tau_dist, self.iou_strict)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_g, self.lambda_r, self.neg_fraction)

    @property
    def synth(self) -> SynthConfig:
        return SynthConfig(n_max=self.n_max, n_min=self.n_min, tokens_per_part=self.tokens_per_part,
                           dim=self.dim, size_range=(self.size_min, self.size_max),
                           token_noise=self.token_noise)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["ablate_seeds"] = list(self.ablate_seeds)
        return d

    def diff(self, other: "RunConfig") -> dict[str, tuple[Any, Any]]:
        a, b = self.to_dict(), other.to_dict()
        return {k: (a[k], b[k]) for k in a if a[k] != b[k]}


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    # paper-scale settings: batch 4 with 4-step accumulation, lr 1e-5, 10k steps,
    # 16 tokens of width 2048 per part; valid but far too slow for a CPU
    "paper": {"tokens_per_part": 16, "dim": 2048, "width": 256, "key_dim": 256, "lr": 1e-5,
              "steps": 10000, "batch_size": 4, "grad_accum": 4, "ckpt_every": 1000,
              "out_dir": "runs/paper"},
}

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    default = _FIELDS[name].default
    if name == "ablate_seeds":
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) for v in value):
            raise ConfigError(name, "must be a list of integers")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(name, f"expected a string, got {value!r}")
    return value


def config_from_dict(doc: dict[str, Any], env: dict[str, str] | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    preset = doc.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset], preset=preset)
    for key, value in doc.items():
        if key not in _FIELDS:
            raise ConfigError(key, "unknown field")
        values[key] = _coerce(key, value)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError("seed", f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
    return RunConfig(**values)


def load_config(path: str | Path, env: dict[str, str] | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return config_from_dict(doc, env)


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
