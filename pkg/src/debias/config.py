"""Pipeline configuration: one file, three sections, defaults always materialized."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .dataset import SynthSpec
from .explain import ExplainConfig
from .losses import HyperParams
from .model import DEFAULT_ARCH, DEFAULT_DIM
from .trainer import TrainConfig

CONFIG_VERSION = 1
SEED_ENV = "DEBIAS_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_per_class: int = 200
    image_size: int = 224
    bias_strength: float = 1.0
    noise_level: float = 0.05
    seed: int = 0
    ratios: list[float] = field(default_factory=lambda: [0.7, 0.15, 0.15])

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(n_per_class=self.n_per_class, image_size=self.image_size,
                         bias_strength=self.bias_strength, noise_level=self.noise_level, seed=self.seed)


@dataclass
class TrainSection(HyperParams):
    arch: str = DEFAULT_ARCH
    dim: int = DEFAULT_DIM

    def train_config(self) -> TrainConfig:
        hp = HyperParams(**{f.name: getattr(self, f.name) for f in fields(HyperParams)})
        return TrainConfig(hp=hp, arch=self.arch, dim=self.dim)


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    format_version: int = CONFIG_VERSION

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_SECTIONS = {"data": DataSection, "train": TrainSection, "explain": ExplainConfig}


def _read(path: Path) -> dict[str, Any]:
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib

        return tomllib.loads(text)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def from_dict(raw: dict[str, Any]) -> PipelineConfig:
    unknown = set(raw) - set(_SECTIONS) - {"format_version"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if raw.get("format_version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config format_version {raw['format_version']}")
    cfg = PipelineConfig()
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be a table")
        allowed = {f.name for f in fields(cls)}
        bad = set(section) - allowed
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        setattr(cfg, name, cls(**{**asdict(getattr(cfg, name)), **section}))
    return cfg


def load_config(path: Optional[Path | str]) -> PipelineConfig:
    """Defaults, overlaid by the file (if any), overlaid by ``$DEBIAS_SEED``
    for any seed the file leaves unset."""
    raw: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        raw = _read(p)
    cfg = from_dict(raw)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"${SEED_ENV} must be an integer, got {env!r}") from exc
        for name in _SECTIONS:
            if "seed" not in raw.get(name, {}):
                getattr(cfg, name).seed = seed
    return cfg
