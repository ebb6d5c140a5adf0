"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .ensemble import DEFAULT_THRESHOLD, canonical_scheme
from .errors import ConfigError, ParameterError
from .explain import ExplainConfig
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class EnsembleConfig:
    scheme: str = "average"
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        try:
            object.__setattr__(self, "scheme", canonical_scheme(self.scheme))
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "ensemble": EnsembleConfig, "explain": ExplainConfig}


def _build(cls, values, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    parts = {name: _build(cls, doc.get(name, {}), name) for name, cls in SECTIONS.items()}
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    return RunConfig(seed=seed, **parts)


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)
