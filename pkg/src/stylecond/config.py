"""Run configuration: generator architecture plus training schedule.

``config.json`` holds two sections, ``model`` and ``train``; every field has a
default and unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    pass


def default_channels(max_resolution: int, top: int = 64, floor: int = 16) -> dict[int, int]:
    """64 channels at 4x4, halving per doubling of resolution, never below ``floor``."""
    out, res, ch = {}, 4, top
    while res <= max_resolution:
        out[res] = max(floor, ch)
        res, ch = res * 2, ch // 2
    return out


def _int_keys(d: Optional[dict]) -> Optional[dict[int, int]]:
    if d is None:
        return None
    return {int(k): int(v) for k, v in d.items()}


@dataclass
class GeneratorConfig:
    latent_dim: int = 64
    embed_dim: Optional[int] = None  # None -> num_classes
    num_classes: Optional[int] = None  # None -> taken from the labels at train time
    mapping_depth: int = 4
    channels: Optional[dict[int, int]] = None  # None -> default_channels(max_resolution)
    max_resolution: int = 32
    noise_enabled: bool = True
    equalized_lr: bool = True
    pixel_norm: bool = True

    def __post_init__(self):
        self.channels = _int_keys(self.channels)

    @property
    def resolutions(self) -> list[int]:
        return [4 * 2**p for p in range(self.max_phase + 1)]

    @property
    def max_phase(self) -> int:
        return self.max_resolution.bit_length() - 3

    @property
    def classes(self) -> int:
        return self.num_classes or 0

    @property
    def class_embed_dim(self) -> int:
        if self.classes == 0:
            return 0
        return self.embed_dim if self.embed_dim is not None else self.classes

    def channel_map(self) -> dict[int, int]:
        return self.channels if self.channels is not None else default_channels(self.max_resolution)

    def validate(self) -> None:
        r = self.max_resolution
        if r < 8 or r & (r - 1):
            raise ConfigError(f"max_resolution must be a power of two >= 8, got {r}")
        if self.mapping_depth < 1 or self.latent_dim < 1:
            raise ConfigError("mapping_depth and latent_dim must be >= 1")
        if self.num_classes is not None and self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")
        if self.classes and self.class_embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        missing = [res for res in self.resolutions if res not in self.channel_map()]
        if missing:
            raise ConfigError(f"channels missing for resolutions {missing}")


@dataclass
class TrainConfig:
    images_per_phase: int = 20_000
    images_per_transition: int = 20_000
    batch_sizes: dict[int, int] = field(default_factory=lambda: {4: 32, 8: 32, 16: 32, 32: 16})
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    adam_eps: float = 1e-8
    gp_lambda: float = 10.0
    critic_steps: int = 1
    total_images: int = 200_000
    max_steps: Optional[int] = None
    log_every: int = 10
    checkpoint_every: int = 1000
    grid_every: int = 1000
    grid_samples: int = 8
    grid_psi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.batch_sizes = _int_keys(self.batch_sizes)

    def batch_size(self, resolution: int) -> int:
        try:
            return self.batch_sizes[resolution]
        except KeyError:
            raise ConfigError(f"no batch size configured for resolution {resolution}") from None

    def validate(self) -> None:
        counts = ("images_per_phase", "images_per_transition", "critic_steps", "total_images",
                  "log_every", "checkpoint_every", "grid_every", "grid_samples")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0 (0 writes the initial checkpoint only)")
        if self.gp_lambda < 0:
            raise ConfigError("gp_lambda must be >= 0")
        if any(b < 1 for b in self.batch_sizes.values()):
            raise ConfigError("batch sizes must be positive")


def _build(cls, data: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    return cls(**data)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    return obj


@dataclass
class RunConfig:
    model: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = sorted(set(data) - {"model", "train"})
        if unknown:
            raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
        cfg = cls(_build(GeneratorConfig, data.get("model", {}), "model"),
                  _build(TrainConfig, data.get("train", {}), "train"))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        for res in self.model.resolutions:
            self.train.batch_size(res)

    def to_dict(self) -> dict:
        return {"model": _jsonable(dataclasses.asdict(self.model)),
                "train": _jsonable(dataclasses.asdict(self.train))}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def override(self, key: str, value: str) -> "RunConfig":
        """Return a copy with ``section.field`` set from a JSON-ish string."""
        section, _, name = key.partition(".")
        data = self.to_dict()
        if section not in data or name not in data[section]:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            data[section][name] = json.loads(value)
        except json.JSONDecodeError:
            data[section][name] = value
        return RunConfig.from_dict(data)
