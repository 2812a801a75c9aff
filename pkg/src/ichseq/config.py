"""Run configuration: one YAML file holding data paths, model, augmentation,
window, and trainer settings, with `--set key.path=value` overrides.

The fully-resolved configuration (defaults filled in) is what gets written to
a run directory and embedded in checkpoints, so a run is reproducible from
its artifacts alone.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .augmentation import AugmentConfig
from .errors import ConfigError
from .model import ModelConfig
from .windowing import WindowTriple


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str | None = None
    val_manifest: str | None = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    peak_lr: float = 1e-3
    eta_min: float = 0.0
    warmup_steps: int | None = None  # None: one epoch's worth of steps
    batch_size_scans: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.batch_size_scans < 1:
            raise ConfigError(f"batch_size_scans must be >= 1, got {self.batch_size_scans}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    windows: WindowTriple = field(default_factory=WindowTriple.default)


_TUPLE_FIELDS = {
    "input_size",
    "channel_norm",
    "crop_scale_range",
    "rotation_range_deg",
}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build_section(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}' section: {sorted(unknown)}")
    kwargs = {k: (_tuplify(v) if k in _TUPLE_FIELDS else v) for k, v in section.items()}
    return cls(**kwargs)


def build_run_config(raw: dict) -> RunConfig:
    raw = raw or {}
    unknown = set(raw) - {"model", "augment", "train", "data", "windows"}
    if unknown:
        raise ConfigError(f"unknown top-level config sections: {sorted(unknown)}")
    windows = raw.get("windows")
    return RunConfig(
        model=_build_section(ModelConfig, raw.get("model", {}), "model"),
        augment=_build_section(AugmentConfig, raw.get("augment", {}), "augment"),
        train=_build_section(TrainConfig, raw.get("train", {}), "train"),
        data=_build_section(DataConfig, raw.get("data", {}), "data"),
        windows=WindowTriple.from_pairs(windows) if windows else WindowTriple.default(),
    )


def load_raw_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} failed to parse: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping at the top level")
    return raw


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply `key.path=value` pairs; the key path must already exist in the config."""
    raw = copy.deepcopy(raw)
    defaults = resolved_dict(build_run_config({}))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key_path, _, value_text = item.partition("=")
        keys = key_path.split(".")
        # the path must name a real config key, even if the file omits it
        probe = defaults
        for k in keys[:-1]:
            if not isinstance(probe, dict) or k not in probe:
                raise ConfigError(f"override references unknown key path {key_path!r}")
            probe = probe[k]
        if not isinstance(probe, dict) or keys[-1] not in probe:
            raise ConfigError(f"override references unknown key path {key_path!r}")
        try:
            value = yaml.safe_load(value_text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r} has an unparsable value: {exc}") from exc
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return raw


def load_run_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    raw = load_raw_config(path)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return build_run_config(raw)


def resolved_dict(cfg: RunConfig) -> dict:
    """Plain nested dict with every field present, for config.resolved and checkpoints."""

    def plain(value):
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        if isinstance(value, list):
            return [plain(v) for v in value]
        return value

    out = {
        "model": {k: plain(v) for k, v in asdict(cfg.model).items()},
        "augment": {k: plain(v) for k, v in asdict(cfg.augment).items()},
        "train": {k: plain(v) for k, v in asdict(cfg.train).items()},
        "data": {k: plain(v) for k, v in asdict(cfg.data).items()},
        "windows": [[spec.level, spec.width] for spec in cfg.windows.channels],
    }
    return out


def save_resolved(path: str | Path, cfg: RunConfig) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(resolved_dict(cfg), f, sort_keys=True)
