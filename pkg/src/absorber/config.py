"""Run configuration: JSON file with fixed sections; unknown keys are errors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .absorption import AbsorptionConfig
from .model import ModelConfig


class RunConfigError(ValueError):
    pass


@dataclass
class PretrainSettings:
    steps: int = 3000
    seq_len: int = 128
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.01
    synthetic_docs: int = 6000
    copy_fraction: float = 0.5


@dataclass
class StreamSettings:
    max_new_tokens: int = 512
    prompt: str | None = None


@dataclass
class BenchSettings:
    modes: list = field(default_factory=lambda: ["standard", "absorber"])
    N: list = field(default_factory=lambda: [256, 512, 1024, 2048])
    K_gen: int = 128
    trials: int = 5


@dataclass
class AblationSettings:
    grid: dict = field(default_factory=lambda: {"n": [16, 32], "m": [32, 64]})
    holdout_len: int = 32


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    absorption: AbsorptionConfig = field(default_factory=AbsorptionConfig)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    stream: StreamSettings = field(default_factory=StreamSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    corpus: str | None = None
    checkpoint: str | None = None
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["absorption"] = self.absorption.to_dict()
        return d


_SECTIONS = {
    "model": ModelConfig,
    "absorption": AbsorptionConfig,
    "pretrain": PretrainSettings,
    "stream": StreamSettings,
    "bench": BenchSettings,
    "ablation": AblationSettings,
}


def _section(cls, raw, name):
    if not isinstance(raw, dict):
        raise RunConfigError(f"section '{name}' must be a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise RunConfigError(f"unknown key(s) {unknown} in section '{name}'; allowed: {sorted(allowed)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"section '{name}': {exc}") from exc


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise RunConfigError("config root must be a mapping")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise RunConfigError(f"unknown top-level key(s) {unknown}; allowed: {sorted(top)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    if not isinstance(cfg.seed, int):
        raise RunConfigError("seed must be an integer")
    if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise RunConfigError("seeds must be a non-empty list of integers")
    return cfg


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_run_config(raw)
