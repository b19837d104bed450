"""Layered pipeline configuration.

Defaults live in the dataclasses below; a YAML/JSON file overrides them and
``--set section.key=value`` flags override the file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class SceneConfig:
    n_scenes: int = 1
    n_frames: int = 32
    width: int = 64
    height: int = 64
    fov_deg: float = 70.0
    trajectory: str = "orbit"
    n_objects: int = 4


@dataclass
class GeometryConfig:
    feature_dim: int = 32
    hidden: int = 32
    extractor_hidden: int = 16
    steps: int = 48
    radius: float = 0.08
    max_neighbors: int = 8
    near: float = 0.1
    far: float = 6.0
    mask_threshold: int = 1
    density_scale: float = 10.0
    stride: int = 1
    n_obs: int = 4
    lr: float = 1e-4
    batch_size: int = 16
    rays_per_view: int = 64
    train_steps: int = 2000
    log_every: int = 50


@dataclass
class CodecConfig:
    codebook_size: int = 512
    code_dim: int = 64
    downsample: int = 8
    hidden: int = 64
    beta: float = 0.25
    lr: float = 1e-4
    batch_size: int = 16
    train_steps: int = 5000
    log_every: int = 100


@dataclass
class GeneratorConfig:
    d_model: int = 128
    enc_layers: int = 4
    dec_layers: int = 6
    heads: int = 4
    ff_mult: int = 4
    embed_hidden: int = 64
    patch_stride: int = 8
    patch_kernel: int = 4
    n_probed: int = 27
    n_obs: int = 4
    probe_source: str = "novel"
    temperature: float = 1.0
    mode: str = "multinomial"
    lr: float = 1e-4
    batch_size: int = 16
    train_steps: int = 1000
    log_every: int = 50


@dataclass
class MetricsConfig:
    ssim_window: int = 8
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2


@dataclass
class PipelineConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0
    out_dir: str = "runs"
    precision: str = "float32"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        cfg = cls()
        apply_overrides(cfg, _flatten(data))
        return cfg


def _flatten(data: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(current: Any, value: Any) -> Any:
    if isinstance(value, str) and not isinstance(current, str):
        value = yaml.safe_load(value)
    if isinstance(current, bool):
        return bool(value)
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, Any]) -> PipelineConfig:
    """Set dotted keys (``geometry.radius``) on ``cfg`` in place."""
    for dotted, value in overrides.items():
        target: Any = cfg
        *path, leaf = dotted.split(".")
        for part in path:
            if not hasattr(target, part):
                raise KeyError(f"unknown config section {dotted!r}")
            target = getattr(target, part)
        if not hasattr(target, leaf) or not dataclasses.is_dataclass(target):
            raise KeyError(f"unknown config key {dotted!r}")
        setattr(target, leaf, _coerce(getattr(target, leaf), value))
    return cfg


def parse_set_flags(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError(f"config {path} must be a mapping")
        apply_overrides(cfg, _flatten(data))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
