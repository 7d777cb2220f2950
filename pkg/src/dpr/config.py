"""Run configuration: one YAML file, strict schema, flag overrides.

Unknown keys are rejected loudly. The environment variable ``DPR_DATA_ROOT``
provides the default prefix for relative data paths.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import yaml

from .nets import EncoderConfig
from .toyenv import EnvConfig
from .view_aug import AugmentConfig

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration file or override."""


@dataclass
class DataConfig:
    root: str = "pretrain_data"  # dataset directory, resolved against DPR_DATA_ROOT
    image_size: tuple[int, int] = (112, 112)
    n_objects: int = 6
    depth_range: tuple[float, float] = (0.5, 4.0)
    depth_lo: float = 0.0       # raw-depth interpretation for 16-bit ingestion
    depth_hi: float = 65535.0


@dataclass
class PairConfig:
    thresholds: tuple[float, ...] = (0.3, 0.5, 0.7)
    cross_product: bool = False
    distance_norm: str = "source_diagonal"  # or "grid_diagonal"

    def __post_init__(self):
        if self.distance_norm not in ("source_diagonal", "grid_diagonal"):
            raise ConfigError(f"unknown distance_norm {self.distance_norm!r}")


@dataclass
class LossConfig:
    tau: float = 0.06
    alpha: float = 1.0


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 32
    low_res: int = 112
    high_res: int = 224
    high_res_frac: float = 0.1
    base_lr: float = 3e-4
    final_lr: float = 1e-5
    warmup_frac: float = 0.05
    weight_decay: float = 1e-5
    ema_momentum: float = 0.99
    optimizer: str = "adamw"    # or "lars"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.high_res_frac <= 1.0:
            raise ConfigError("high_res_frac must lie in [0,1]")
        if self.optimizer not in ("adamw", "lars"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class BcConfig:
    epochs: int = 400
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 1e-5
    eval_every: int = 40
    eval_episodes: int = 20
    use_proprio: bool = True
    freeze_encoder: bool = False
    attn_dim: int = 64
    seed: int = 0


_SECTIONS = {
    "data": DataConfig,
    "augment": AugmentConfig,
    "pairs": PairConfig,
    "loss": LossConfig,
    "encoder": EncoderConfig,
    "pretrain": PretrainConfig,
    "bc": BcConfig,
    "env": EnvConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pairs: PairConfig = field(default_factory=PairConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    bc: BcConfig = field(default_factory=BcConfig)
    env: EnvConfig = field(default_factory=EnvConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d


def _build_section(cls, values: dict, section: str):
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    coerced = {}
    for name, val in values.items():
        if isinstance(val, list):
            val = tuple(val)
        coerced[name] = val
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] config: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    raw.pop("schema_version", None)
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {
        name: _build_section(cls, raw.get(name, {}) or {}, name)
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(**sections)


def load_config(path: Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Read YAML config and apply ``section.key=value`` overrides."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file must be a mapping, got {type(raw).__name__}")
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        raw.setdefault(section, {})
        if raw[section] is None:
            raw[section] = {}
        raw[section][name] = yaml.safe_load(value)
    return config_from_dict(raw)


def data_root(explicit: str | Path | None = None) -> Path:
    """Default data prefix: explicit path, else $DPR_DATA_ROOT, else cwd."""
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get("DPR_DATA_ROOT", "."))
