"""Flat key=value experiment configs.

One file carries the model, training, and decoding settings. Three builtin
profiles ship as package data (configs/test-nano, configs/test-small,
configs/desk-default); load_config accepts either a filesystem path or a
builtin name.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    batch_size: int = 8
    max_steps: int = 1200
    warmup_steps: int = 100
    lambda_sum: float = 1.0
    lambda_mcs: float = 1.0
    lambda_di: float = 1.0
    seed: int = 0
    grad_clip_norm: float = 1.0
    eval_interval: int = 200
    split: str = "hash"          # hash = 80/10/10 by dialogue id; none = all splits share every record
    split_salt: str = "mmksum-split-v1"
    finite_checks: bool = False  # debug profile turns per-op NaN/Inf scans on
    min_freq: int = 1
    retrieval_k: int = 3

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.max_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("batch_size must be >= 1 and step counts non-negative")
        lam = (self.lambda_sum, self.lambda_mcs, self.lambda_di)
        if any(v < 0 for v in lam) or not any(v > 0 for v in lam):
            raise ConfigError(f"task weights must be non-negative with at least one positive, got {lam}")
        if self.split not in ("hash", "none"):
            raise ConfigError(f"split must be 'hash' or 'none', got {self.split!r}")
        if self.min_freq < 1 or self.retrieval_k < 1:
            raise ConfigError("min_freq and retrieval_k must be >= 1")

    def lambdas(self) -> dict[str, float]:
        return {"sum": self.lambda_sum, "mcs": self.lambda_mcs, "di": self.lambda_di}


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    beam_width: int = 1
    max_new_tokens: int = 48
    length_penalty: float = 0.0

    def validate(self) -> None:
        if self.strategy not in ("greedy", "beam"):
            raise ConfigError(f"strategy must be 'greedy' or 'beam', got {self.strategy!r}")
        if self.beam_width < 1 or self.max_new_tokens < 1:
            raise ConfigError("beam_width and max_new_tokens must be >= 1")
        if self.length_penalty < 0:
            raise ConfigError(f"length_penalty must be >= 0, got {self.length_penalty}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    decode: DecodeConfig

    def validate(self) -> None:
        self.model.validate(require_vocab=False)
        self.train.validate()
        self.decode.validate()


BUILTIN_CONFIG_NAMES = ("test-nano", "test-small", "desk-default")


def _coerce(raw: str, target_type):
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    field_types = {}
    for cls in (ModelConfig, TrainConfig, DecodeConfig):
        for f in fields(cls):
            field_types[f.name] = (cls, f.type)
    values: dict[type, dict] = {ModelConfig: {}, TrainConfig: {}, DecodeConfig: {}}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in field_types:
            raise ConfigError(f"{source}:{line_no}: unknown config key {key!r}")
        cls, type_name = field_types[key]
        target = {"int": int, "float": float, "bool": bool, "str": str}[type_name]
        values[cls][key] = _coerce(raw, target)
    cfg = ExperimentConfig(model=ModelConfig(**values[ModelConfig]),
                           train=TrainConfig(**values[TrainConfig]),
                           decode=DecodeConfig(**values[DecodeConfig]))
    cfg.validate()
    return cfg


def load_config(path_or_name: str) -> ExperimentConfig:
    """Read a config file; bare builtin names resolve to the shipped profiles."""
    p = Path(path_or_name)
    if p.exists():
        return parse_config(p.read_text(encoding="utf-8"), source=str(p))
    if path_or_name in BUILTIN_CONFIG_NAMES:
        text = resources.files("mmksum").joinpath(f"configs/{path_or_name}").read_text("utf-8")
        return parse_config(text, source=f"builtin:{path_or_name}")
    raise ConfigError(f"config {path_or_name!r} is neither a file nor one of {BUILTIN_CONFIG_NAMES}")
