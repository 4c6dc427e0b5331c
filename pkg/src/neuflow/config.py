"""Architecture hyperparameters for the NeuFlow network."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import yaml


class ConfigError(ValueError):
    """Raised for inconsistent or invalid configuration values."""


@dataclass(frozen=True)
class NeuFlowConfig:
    """All architecture hyperparameters in one validated record.

    ``per_level_channels`` lists the block widths at pyramid scales
    1/1, 1/2, 1/4, 1/8 and 1/16. The first four are concatenated at 1/8
    and fused to ``feature_dim``; the last feeds the 1/16 merge block.
    """

    feature_dim: int = 90
    cross_attention_layers: int = 2
    self_attention_layers: int = 1
    ffn_dim: int = 360
    correlation_radius: int = 3
    refinement_depth: int = 6
    refinement_width: int = 256
    upsample_branch_dim: int = 64
    mask_width: int = 128
    per_level_channels: tuple[int, ...] = (24, 24, 24, 24, 24)
    norm_groups: int = 8
    softmax_scale: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_level_channels", tuple(int(c) for c in self.per_level_channels))
        self.validate()

    def validate(self) -> None:
        positive = {
            "feature_dim": self.feature_dim,
            "ffn_dim": self.ffn_dim,
            "refinement_width": self.refinement_width,
            "upsample_branch_dim": self.upsample_branch_dim,
            "mask_width": self.mask_width,
            "norm_groups": self.norm_groups,
        }
        for name, value in positive.items():
            if int(value) <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.cross_attention_layers < 1:
            raise ConfigError("cross_attention_layers must be >= 1")
        if self.self_attention_layers < 1:
            raise ConfigError("self_attention_layers must be >= 1")
        if self.correlation_radius < 1:
            raise ConfigError("correlation_radius must be >= 1")
        if self.refinement_depth < 2:
            raise ConfigError("refinement_depth must be >= 2 (input conv + flow projection)")
        if len(self.per_level_channels) != 5:
            raise ConfigError(
                "per_level_channels needs 5 entries (scales 1/1, 1/2, 1/4, 1/8, 1/16), "
                f"got {len(self.per_level_channels)}"
            )
        if any(c <= 0 for c in self.per_level_channels):
            raise ConfigError("per_level_channels must all be positive")
        if self.softmax_scale is not None and self.softmax_scale <= 0:
            raise ConfigError("softmax_scale must be positive when given")

    @property
    def correlation_channels(self) -> int:
        return (2 * self.correlation_radius + 1) ** 2

    @property
    def attention_scale(self) -> float:
        if self.softmax_scale is not None:
            return float(self.softmax_scale)
        return self.feature_dim ** -0.5

    @classmethod
    def base(cls, **overrides: Any) -> "NeuFlowConfig":
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides: Any) -> "NeuFlowConfig":
        """Desk-scale configuration used by gradient checks and overfit runs."""
        params: dict[str, Any] = dict(
            feature_dim=8,
            cross_attention_layers=2,
            self_attention_layers=1,
            ffn_dim=16,
            correlation_radius=3,
            refinement_depth=2,
            refinement_width=32,
            upsample_branch_dim=8,
            mask_width=16,
            per_level_channels=(8, 8, 8, 8, 8),
        )
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["per_level_channels"] = list(self.per_level_channels)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NeuFlowConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "per_level_channels" in data:
            data["per_level_channels"] = tuple(data["per_level_channels"])
        return cls(**data)

    def with_overrides(self, overrides: Iterable[str]) -> "NeuFlowConfig":
        """Apply flat ``key=value`` strings, parsing values as YAML scalars."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in d:
                raise ConfigError(f"unknown config key {key!r}")
            d[key] = yaml.safe_load(raw)
        return self.from_dict(d)


def load_config(path: str | Path | None, preset: str = "base") -> NeuFlowConfig:
    """Load a YAML config file. A top-level ``preset`` key selects the base."""
    data: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        if "model" in data:
            preset = data.get("preset", preset)
            data = dict(data["model"] or {})
        else:
            data = dict(data)
    preset = data.pop("preset", preset)
    if preset == "base":
        return NeuFlowConfig.base(**_tuple_levels(data))
    if preset == "tiny":
        return NeuFlowConfig.tiny(**_tuple_levels(data))
    raise ConfigError(f"unknown preset {preset!r}")


def _tuple_levels(data: dict[str, Any]) -> dict[str, Any]:
    if "per_level_channels" in data:
        data = dict(data, per_level_channels=tuple(data["per_level_channels"]))
    return data


def group_count(channels: int, max_groups: int) -> int:
    """Largest divisor of ``channels`` not exceeding ``max_groups``."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


__all__ = ["ConfigError", "NeuFlowConfig", "load_config", "group_count"]
