"""Run configuration: training hyperparameters and scene-generator settings.

Both are flat dataclasses that round-trip through JSON. ``from_dict``
rejects unknown keys and validates ranges, raising ``ConfigError`` with the
offending field name.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{key}: expected a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{key}: expected an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{key}: expected a number")
            value = float(value)
        elif isinstance(default, (list, tuple)):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{key}: expected a list")
            value = type(default)(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{where}.{key}: expected a string")
        kwargs[key] = value
    obj = cls(**kwargs)
    obj.validate()
    return obj


@dataclass
class TrainConfig:
    k: int = 64
    prompt_length: int = 4
    dim: int = 16
    token_dim: int = 8
    patch_size: int = 8
    channels: int = 3
    image_size: int = 64
    upsample_factor: int = 4
    epsilon: float = 1.0
    gamma: float = 0.999
    logit_scale: float = 10.0
    lr_decoder: float = 2e-4
    lr_prompts: float = 2e-5
    lr_encoder: float = 2e-6
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 500
    use_clustering: bool = True
    use_momentum_encoder: bool = True
    supervise_empty: bool = True
    cover_only: bool = True
    cutout_holes: int = 1
    cutout_frac: float = 0.25
    jitter_scale: float = 0.1
    jitter_shift: float = 0.05
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50

    def validate(self) -> None:
        for name in ("k", "prompt_length", "dim", "token_dim", "patch_size", "channels",
                     "image_size", "upsample_factor", "batch_size", "sinkhorn_max_iter"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be >= 1")
        for name in ("epsilon", "logit_scale", "lr_decoder", "lr_prompts", "lr_encoder", "sinkhorn_tol", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name}: must be > 0")
        for name in ("steps", "cutout_holes", "checkpoint_every", "log_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name}: must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("train.gamma: must lie in [0, 1]")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("train.beta1/beta2: must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay: must be >= 0")
        if not 0.0 < self.cutout_frac < 1.0:
            raise ConfigError("train.cutout_frac: must lie in (0, 1)")
        if self.jitter_scale < 0 or self.jitter_shift < 0:
            raise ConfigError("train.jitter_scale/jitter_shift: must be >= 0")
        if self.image_size % self.patch_size:
            raise ConfigError("train.image_size: must be divisible by patch_size")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("train.seed: must be an unsigned 64-bit integer")

    @property
    def feature_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def output_size(self) -> int:
        return self.feature_size * self.upsample_factor

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, where: str = "train") -> "TrainConfig":
        return _from_dict(cls, data, where)


@dataclass
class GeneratorSpec:
    num_classes: int = 4
    image_size: int = 64
    shapes_per_image: list = field(default_factory=lambda: [1, 3])
    fragments_per_mask: list = field(default_factory=lambda: [3, 8])
    fragment_mode: str = "voronoi"
    color_jitter: float = 0.06
    texture: float = 0.03
    num_samples: int = 200
    seed: int = 7

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("generator.num_classes: must be >= 1")
        if self.image_size < 8:
            raise ConfigError("generator.image_size: must be >= 8")
        for name in ("shapes_per_image", "fragments_per_mask"):
            rng = getattr(self, name)
            if len(rng) != 2 or any(isinstance(v, bool) or not isinstance(v, int) for v in rng):
                raise ConfigError(f"generator.{name}: expected [min, max] integers")
            lo_allowed = 1 if name == "fragments_per_mask" else 0
            if rng[0] < lo_allowed or rng[1] < rng[0]:
                raise ConfigError(f"generator.{name}: need {lo_allowed} <= min <= max, got {list(rng)}")
        if self.fragment_mode not in ("grid", "voronoi"):
            raise ConfigError("generator.fragment_mode: must be 'grid' or 'voronoi'")
        if self.color_jitter < 0 or self.texture < 0:
            raise ConfigError("generator.color_jitter/texture: must be >= 0")
        if self.num_samples < 0:
            raise ConfigError("generator.num_samples: must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("generator.seed: must be an unsigned 64-bit integer")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, where: str = "generator") -> "GeneratorSpec":
        return _from_dict(cls, data, where)


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "run"
    checkpoint: str = ""

    def validate(self) -> None:
        pass

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, where: str = "paths") -> "PathsConfig":
        return _from_dict(cls, data, where)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)
    cluster_masks_k: int = 16

    def to_dict(self) -> dict[str, Any]:
        return {
            "train": self.train.to_dict(),
            "generator": self.generator.to_dict(),
            "paths": self.paths.to_dict(),
            "cluster_masks_k": self.cluster_masks_k,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        unknown = sorted(set(data) - {"train", "generator", "paths", "cluster_masks_k"})
        if unknown:
            raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
        k = data.get("cluster_masks_k", 16)
        if isinstance(k, bool) or not isinstance(k, int) or k < 1:
            raise ConfigError("config.cluster_masks_k: must be an integer >= 1")
        return cls(
            train=TrainConfig.from_dict(data.get("train", {})),
            generator=GeneratorSpec.from_dict(data.get("generator", {})),
            paths=PathsConfig.from_dict(data.get("paths", {})),
            cluster_masks_k=k,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config: invalid JSON ({exc})") from exc
        return cls.from_dict(data)
