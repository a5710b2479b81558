"""Pipeline configuration: one JSON document, nested per stage, unknown keys rejected."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError
from .fusion import FusionConfig
from .integration import IntegrationConfig
from .projection import CROP_EXPANSION, CROP_LEVELS, DEPTH_TOL, Z_NEAR
from .scene import DEFAULT_FEATURE_DIM
from .synth import SynthConfig


@dataclass(frozen=True)
class ProjectionConfig:
    depth_tol: float = DEPTH_TOL
    z_near: float = Z_NEAR

    def __post_init__(self):
        if self.depth_tol <= 0 or self.z_near <= 0:
            raise ConfigError("depth_tol and z_near must be positive")


@dataclass(frozen=True)
class FeatureConfig:
    top_k: int = 5
    crop_levels: int = CROP_LEVELS
    crop_expansion: float = CROP_EXPANSION
    dim: int = DEFAULT_FEATURE_DIM
    text_seed: int = 0

    def __post_init__(self):
        if self.top_k < 1 or self.crop_levels < 1 or self.dim < 1 or self.crop_expansion < 0:
            raise ConfigError("top_k, crop_levels, dim must be >= 1 and crop_expansion >= 0")


@dataclass(frozen=True)
class EvalConfig:
    sweep_grid: tuple = (0.25, 0.5, 0.9)

    def __post_init__(self):
        grid = tuple(float(x) for x in self.sweep_grid)
        if not grid or any(not 0.0 <= x <= 1.0 for x in grid):
            raise ConfigError("sweep_grid values must lie in [0, 1]")
        object.__setattr__(self, "sweep_grid", grid)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, pairs) -> "PipelineConfig":
        return apply_overrides(self, pairs)


def _build(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        sub = f"{path}.{name}" if path else name
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, sub)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data)


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: PipelineConfig, pairs) -> PipelineConfig:
    """Apply ``key.path=value`` overrides; values are parsed as JSON when possible."""
    data = copy.deepcopy(config.to_dict())
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"override {key!r}: unknown key {p!r}")
            node = node[p]
        if not isinstance(node, dict) or (parts[-1] not in node and node is not data.get("synth", {}).get("miss_rate")):
            raise ConfigError(f"override {key!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = _parse_value(raw)
    return from_dict(data)
