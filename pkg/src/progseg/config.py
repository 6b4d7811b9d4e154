"""Run configuration: every tunable knob, strict loading and named presets."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from importlib import resources
from pathlib import Path

import yaml

from .trainkit.synth import SHAPES, SynthConfig

CONFIG_VERSION = 1

CHOICES = {
    "embedding": ("dual", "original", "centralized"),
    "query_sampling": ("weighted_fps", "fps"),
    "point_sampling": ("class_aware", "random"),
    "center_definition": ("average", "median", "box"),
    "fine_query_embedding": ("avg", "avg_shifted", "initial"),
    "query_init": ("sampled", "gt_center", "pred_center"),
    "coarse_matching": ("proposal", "center"),
    "mask_features": ("F+E", "F"),
}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class ModelConfig:
    voxel_size: float = 0.1
    fourier_bands: int = 6  # octaves above ~voxel resolution only alias
    fourier_extent: float = 4.0
    feat_dim: int = 32
    backbone_hidden: int = 32
    backbone_radius: float = 0.25
    offset_hidden: int = 32
    num_queries: int = 20
    num_layers: int = 6
    num_heads: int = 4
    ffn_dim: int = 64
    residual: bool = True
    literal_attention: bool = False
    # ablation switches
    embedding: str = "dual"
    query_sampling: str = "weighted_fps"
    point_sampling: str = "class_aware"
    fine: bool = True
    merge: bool = True
    center_definition: str = "average"
    fine_query_embedding: str = "avg"
    query_init: str = "sampled"
    coarse_matching: str = "proposal"
    mask_features: str = "F+E"
    weight_semantic: bool = False

    @property
    def fourier_base_scale(self) -> float:
        return 2.0 * math.pi / self.fourier_extent


@dataclasses.dataclass
class LossConfig:
    alpha: float = 25.0
    lambdas: list = dataclasses.field(default_factory=lambda: [2.0, 5.0, 2.0])
    no_object_weight: float = 0.1
    w_reg: float = 1.0
    w_dir: float = 1.0
    w_fore: float = 1.0
    w_back: float = 1.0
    use_loss_fore: bool = True
    use_loss_back: bool = True
    loss_cm: bool = False


@dataclasses.dataclass
class TrainConfig:
    steps: int = 3000
    max_lr: float = 2e-3
    weight_decay: float = 1e-4
    pct_start: float = 0.1
    grad_clip: float = 1.0
    n_per_instance: int = 128
    sample_budget: int = 1280
    num_scenes: int = 8
    eval_every: int = 0
    checkpoint_every: int = 0
    log_every: int = 1


@dataclasses.dataclass
class SynthSection:
    num_instances: list = dataclasses.field(default_factory=lambda: [3, 6])
    points_per_instance: list = dataclasses.field(default_factory=lambda: [400, 800])
    radius: list = dataclasses.field(default_factory=lambda: [0.25, 0.45])
    shapes: list = dataclasses.field(default_factory=lambda: list(SHAPES))
    min_separation: float = 0.3
    clutter_fraction: float = 0.1
    noise: float = 0.005
    extent: float = 4.0
    color_jitter: float = 0.08
    adjacent: bool = False
    adjacent_gap: float = 0.03

    def to_synth(self, seed: int) -> SynthConfig:
        return SynthConfig(
            num_instances=tuple(self.num_instances),
            points_per_instance=tuple(self.points_per_instance),
            radius=tuple(self.radius),
            shapes=tuple(self.shapes),
            min_separation=self.min_separation,
            clutter_fraction=self.clutter_fraction,
            noise=self.noise,
            extent=self.extent,
            color_jitter=self.color_jitter,
            adjacent=self.adjacent,
            adjacent_gap=self.adjacent_gap,
            seed=seed,
        )


@dataclasses.dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    threads: int = 1
    deterministic: bool = False
    debug_trace: bool = False
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: SynthSection = dataclasses.field(default_factory=SynthSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def seeds(self) -> dict:
        """Independent child seeds for scenes, parameter init and sampling."""
        import numpy as np

        children = np.random.SeedSequence(self.seed).spawn(3)
        names = ("scene", "init", "sampling")
        return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}

    def validate(self) -> "RunConfig":
        m = self.model
        for key, allowed in CHOICES.items():
            if getattr(m, key) not in allowed:
                raise ConfigError(f"model.{key} must be one of {allowed}, got {getattr(m, key)!r}")
        for key in ("voxel_size", "fourier_extent", "backbone_radius"):
            if not getattr(m, key) > 0:
                raise ConfigError(f"model.{key} must be positive")
        for key in ("fourier_bands", "feat_dim", "num_queries", "num_layers", "num_heads"):
            if getattr(m, key) < 1:
                raise ConfigError(f"model.{key} must be >= 1")
        if m.feat_dim % m.num_heads:
            raise ConfigError("model.feat_dim must be divisible by model.num_heads")
        if m.literal_attention and m.feat_dim != 6 * m.fourier_bands:
            raise ConfigError("literal_attention needs feat_dim == 6 * fourier_bands")
        if len(self.loss.lambdas) != 3:
            raise ConfigError("loss.lambdas must have three entries")
        if self.train.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.train.n_per_instance < 1 or self.train.sample_budget < 1:
            raise ConfigError("sampling budgets must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            self.synth.to_synth(0).validate()
        except ValueError as exc:
            raise ConfigError(f"synth: {exc}") from exc
        return self


def _check_type(path, value, typ):
    origin = typing.get_origin(typ)
    if typ is bool:
        ok = isinstance(value, bool)
    elif typ is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif typ is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif typ is str:
        ok = isinstance(value, str)
    elif typ is list or origin is list:
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {getattr(typ, '__name__', typ)}, got {value!r}")
    return float(value) if typ is float else value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        typ = hints[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(typ):
            kwargs[name] = _build(typ, value, sub)
        else:
            kwargs[name] = _check_type(sub, value, typ)
    return cls(**kwargs)


def _merge(base: dict, override: dict, path="") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"{path or 'config'}: unknown key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key}: expected a mapping")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def from_dict(data: dict) -> RunConfig:
    merged = _merge(RunConfig().to_dict(), data or {})
    cfg = _build(RunConfig, merged, "")
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version}")
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("progseg").joinpath("presets").iterdir()
                  if p.name.endswith(".yaml"))


def preset_overrides(name: str) -> dict:
    path = resources.files("progseg").joinpath("presets", f"{name}.yaml")
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    return yaml.safe_load(path.read_text()) or {}


def load_preset(name: str, extra: dict | None = None) -> RunConfig:
    data = preset_overrides(name)
    if extra:
        data = _merge(_merge(RunConfig().to_dict(), data), extra)
    return from_dict(data)


def resolve_config(preset: str | None = None, path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then a named preset, then a config file, then explicit overrides."""
    data = RunConfig().to_dict()
    if preset:
        data = _merge(data, preset_overrides(preset))
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        data = _merge(data, loaded or {})
    if overrides:
        data = _merge(data, overrides)
    return from_dict(data)
