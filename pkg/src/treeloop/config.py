"""Pipeline configuration: one dataclass per stage, merged from JSON + CLI overrides.

Unknown keys are rejected so that a typo in a config file fails loudly instead
of silently running with defaults. Every run directory stores the resolved
snapshot (``config.json``), which is what resume reads back.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class TileConfig:
    size: float = 100.0           # tile edge length, meters
    ground_cell: float = 2.0      # ground-model grid cell, meters
    chm_pitch: float = 0.5        # CHM raster pitch, meters


@dataclass
class WatershedConfig:
    sigma: float = 1.0            # CHM smoothing, meters
    min_height: float = 2.0       # minimum seed height, meters
    seed_radius: float = 2.0      # maxima dominance radius, meters
    background: float = 0.5       # cells/points below this stay unlabeled, meters


@dataclass
class RaterConfig:
    resolution: int = 32          # voxel grid cells per axis
    extent: float = 20.0          # voxel grid metric edge length, meters
    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class RulesConfig:
    apex_tolerance: float = 0.01        # apex distinctness, meters
    overlap_diameter: float = 2.0       # max horizontal diameter of intersection, meters
    ioc_threshold: float = 0.7          # strict upper bound on intersection-over-cluster
    overlap_strategy: str = "diameter"  # {"diameter", "boundary"}; see accept_candidate


@dataclass
class BackendConfig:
    seed_radius: float = 4.0      # instance seed dominance radius, meters
    min_cluster_points: int = 10
    tree_threshold: float = 0.5   # P(tree) decision boundary
    hidden: int = 16              # scorer hidden width
    learning_rate: float = 1e-2
    batch_size: int = 8192
    command: str | None = None    # external backend command template, None = built-in
    timeout: float = 3600.0


@dataclass
class LoopConfig:
    epochs_per_iteration: int = 3
    init_epochs: int = 15         # first backend fit; it starts untrained
    max_iterations: int = 9
    stabilize_min_new: int = 5
    stabilize_fraction: float = 0.01
    stabilize_patience: int = 2
    seed: int = 0


@dataclass
class ServerConfig:
    port: int = 8749
    sample_seed: int = 0


@dataclass
class SynthConfig:
    extent: float = 100.0
    density: float = 38.0         # pt/m^2
    trees: int = 60
    min_spacing: float = 4.5
    rocks: int = 6
    shrubs: int = 8
    slope: float = 0.0
    noise: float = 0.03
    seed: int = 0


@dataclass
class Config:
    tile: TileConfig = field(default_factory=TileConfig)
    watershed: WatershedConfig = field(default_factory=WatershedConfig)
    rater: RaterConfig = field(default_factory=RaterConfig)
    rules: RulesConfig = field(default_factory=RulesConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        cfg = cls()
        _apply(cfg, data, prefix="")
        return cfg

    def apply_overrides(self, overrides: dict[str, Any]) -> "Config":
        """Apply dotted-key overrides, e.g. {"watershed.sigma": 1.5}."""
        for key, value in overrides.items():
            obj = self
            parts = key.split(".")
            for part in parts[:-1]:
                if not hasattr(obj, part):
                    raise KeyError(f"unknown config key: {key!r}")
                obj = getattr(obj, part)
            leaf = parts[-1]
            if not hasattr(obj, leaf):
                raise KeyError(f"unknown config key: {key!r}")
            current = getattr(obj, leaf)
            setattr(obj, leaf, _coerce(current, value))
        return self


def _apply(obj: Any, data: dict[str, Any], prefix: str) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise KeyError(f"unknown config key: {prefix}{key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise TypeError(f"config section {prefix}{key!r} must be an object")
            _apply(current, value, prefix=f"{prefix}{key}.")
        else:
            setattr(obj, key, _coerce(current, value))


def _coerce(current: Any, value: Any) -> Any:
    """Coerce an override to the type of the current value (CLI passes strings)."""
    if isinstance(value, str) and not isinstance(current, str):
        if current is None:
            return value
        if isinstance(current, bool):
            return value.lower() in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            return tuple(int(v) for v in value.split(","))
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    return value
