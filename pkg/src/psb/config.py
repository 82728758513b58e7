"""Run configuration: nested dataclasses with strict JSON loading.

Resolution order is defaults < JSON file < command-line overrides.  Unknown
keys are rejected with their dotted path.  The ``PSB_SEED`` environment
variable, when set, overrides every seed field.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .autoenc import ModelConfig
from .harness import TrainConfig
from .psb_encoder import PSBConfig
from .recurrent import RecurrentConfig
from .synthdata import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    episodes: int = 500
    seed: int = 0
    T: int = 6
    H: int = 32
    W: int = 32
    min_objects: int = 2
    max_objects: int = 3
    max_speed: float = 1.5

    def synth(self) -> SynthConfig:
        return SynthConfig(T=self.T, H=self.H, W=self.W, min_objects=self.min_objects,
                           max_objects=self.max_objects, max_speed=self.max_speed)


@dataclass
class BenchConfig:
    encoders: list[str] = field(default_factory=lambda: ["psb", "recurrent"])
    T_list: list[int] = field(default_factory=lambda: [6, 12, 18, 24])
    reps: int = 5
    warmup: int = 2
    workers: int = 4
    batch: int = 4
    N: int = 4
    L: int = 64
    D: int = 64


@dataclass
class ProbeConfig:
    factors: list[str] = field(default_factory=lambda: ["position", "color", "shape", "size"])
    lam: float = 1e-4
    max_rounds: int = 20
    holdout: float = 0.25


@dataclass
class EvalConfig:
    metrics: list[str] = field(default_factory=lambda: ["fgari", "psnr"])
    grouping: str = "per-video"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    psb: PSBConfig = field(default_factory=PSBConfig)
    recurrent: RecurrentConfig = field(default_factory=RecurrentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def encoder_config(self):
        return self.psb if self.model.encoder == "psb" else self.recurrent

    def to_dict(self) -> dict:
        return asdict(self)


def _field_default(f):
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return f.default


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {path}{key}")
        default = _field_default(known[key])
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{path}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key: {path}{key}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def parse_assignment(text: str) -> dict:
    """'train.steps=100' -> {'train': {'steps': 100}}; values parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def resolve(config_file=None, overrides: list[dict] = (), env=None) -> RunConfig:
    env = os.environ if env is None else env
    data = RunConfig().to_dict()
    if config_file is not None:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from exc
        data = merge(data, loaded)
    for ov in overrides:
        data = merge(data, ov)
    if env.get("PSB_SEED"):
        try:
            seed = int(env["PSB_SEED"])
        except ValueError as exc:
            raise ConfigError(f"PSB_SEED must be an integer, got {env['PSB_SEED']!r}") from exc
        for section in ("data", "model", "train"):
            data[section]["seed"] = seed
    return from_dict(data)


def write_config(out_dir, cfg: RunConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
