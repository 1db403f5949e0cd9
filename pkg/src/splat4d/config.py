"""Run configuration: nested dataclasses serialised as JSON.

``RunConfig.from_dict`` rejects unknown keys at every level and checks the
schema version, so a typo in a config file fails loudly instead of silently
falling back to a default.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .sds import SdsConfig

SCHEMA_VERSION = 1
DENOISERS = ("none", "gt", "identity", "blur")


@dataclass
class PlanConfig:
    scale: float = 0.05
    boundaries: tuple = (3000, 15000, 20000, 30000, 35000, 40000)

    def __post_init__(self) -> None:
        self.boundaries = tuple(int(b) for b in self.boundaries)
        if self.scale <= 0:
            raise ValueError("plan scale must be positive")
        if len(self.boundaries) != 6 or list(self.boundaries) != sorted(self.boundaries):
            raise ValueError("plan needs six increasing boundaries")


@dataclass
class LossConfig:
    recon: float = 1.0
    ssim_weight: float = 0.2
    small_motion: float = 0.01
    small_motion_include_scale: bool = True
    norm: float = 0.01
    diff: float = 0.01
    rigid: float = 0.01
    rot: float = 0.01
    knn_k: int = 20
    knn_lambda: float | None = None      # None: 2000 / scene_extent**2


@dataclass
class DensifySection:
    tau_alpha: float = 5e-3
    tau_alpha_motion: float = 1e-2
    tau_grad: float = 2e-4
    split_factor: float = 1.6
    interval: int = 100
    percent_dense: float = 0.01


@dataclass
class LrConfig:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    position_extent_scale: bool = True
    scale_rot: float = 1e-3
    deform_init: float = 1e-3
    deform_final: float = 1e-5
    pose: float = 1e-4
    opacity: float = 0.05
    color: float = 2.5e-3
    clip_norm: float = 10.0


@dataclass
class ModelConfig:
    code_dim: int = 32
    pos_freqs: int = 10
    time_freqs: int = 6
    code_freqs: int = 0
    depth: int = 8
    width: int = 256
    skip: int = 4


@dataclass
class InitConfig:
    sfm_noise: float = 0.01
    opacity: float = 0.1


@dataclass
class AblationConfig:
    perframe_deformation: bool = True
    small_motion: bool = True
    sds: bool = True
    freeze_video: bool = True
    optimize_poses: bool = True


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    denoiser: str = "none"
    background: str = "dataset"          # "dataset" pins the dataset colour, "random" draws a gray per step
    checkpoint_every: int = 250
    plan: PlanConfig = field(default_factory=PlanConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    densify: DensifySection = field(default_factory=DensifySection)
    lr: LrConfig = field(default_factory=LrConfig)
    sds: SdsConfig = field(default_factory=SdsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    init: InitConfig = field(default_factory=InitConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema version {self.schema_version}")
        if self.denoiser not in DENOISERS and not (self.denoiser.startswith("remote:") and len(self.denoiser) > 7):
            raise ValueError(f"denoiser must be one of {DENOISERS} or remote:<address>, got {self.denoiser!r}")
        if self.background not in ("dataset", "random"):
            raise ValueError(f"background must be 'dataset' or 'random', got {self.background!r}")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @property
    def sds_enabled(self) -> bool:
        return self.ablation.sds and self.denoiser != "none"


def _plain(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Set dotted keys (``"plan.scale"``) on a copy of ``cfg``."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        node = data
        *path, leaf = key.split(".")
        for p in path:
            node = node[p]
        if leaf not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[leaf] = value
    return RunConfig.from_dict(data)
