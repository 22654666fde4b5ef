"""Run configuration: nested sections read from a TOML file.

Unknown sections or keys are rejected. ``profile = "full"`` switches the
defaults to the full-scale settings before file values are applied.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


EQ_NORMS = ("voxels", "y0", "none")


@dataclass
class DataConfig:
    depth: int = 8
    size: int = 64
    n_train: int = 8
    n_test: int = 2
    domains: str = "A"  # "A", "B" or "mixed"
    ct_angles: int = 360
    ct_I0: float = 1e5


@dataclass
class AEConfig:
    latent_channels: int = 4
    stages: int = 2
    base_width: int = 16
    groups: int = 8
    edge_weight: float = 0.5
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 2
    crop: int = 32  # in-plane training crop; 0 trains on whole slices
    train_on_cbct: bool = False


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 5e-3
    base_width: int = 16
    levels: int = 2
    temb_dim: int = 64
    groups: int = 8
    epochs: int = 200
    batch_size: int = 2
    lr: float = 1e-3


@dataclass
class LossConfig:
    l1: float = 0.6
    edge: float = 0.2
    lap: float = 0.2
    eq: float = 0.1
    eq_period: int = 10
    eq_rotations: int = 2
    eq_enabled: bool = True
    eq_fractional: bool = False
    eq_norm: str = "voxels"  # L_eq divisor: "voxels" (image voxel count), "y0" (||y0||^2), "none"


@dataclass
class SampleConfig:
    n_steps: int = 100
    guided: bool = False  # experimental: equivariance-guided sampling, needs CT projections
    guidance_weight: float = 0.1
    guidance_sigma2: float = 1.0
    guidance_rotations: int = 2


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    mixing: str = "single"  # "single" or "mixed" (balanced mini-batches)
    data: DataConfig = field(default_factory=DataConfig)
    ae: AEConfig = field(default_factory=AEConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def validate(self) -> "RunConfig":
        _choice("profile", self.profile, ("desk", "full"))
        _choice("mixing", self.mixing, ("single", "mixed"))
        _choice("data.domains", self.data.domains, ("A", "B", "mixed"))
        _choice("loss.eq_norm", self.loss.eq_norm, EQ_NORMS)
        for key, val in [("data.n_train", self.data.n_train), ("data.n_test", self.data.n_test),
                         ("loss.eq_period", self.loss.eq_period),
                         ("loss.eq_rotations", self.loss.eq_rotations),
                         ("diffusion.batch_size", self.diffusion.batch_size),
                         ("ae.batch_size", self.ae.batch_size), ("ae.stages", self.ae.stages),
                         ("ae.latent_channels", self.ae.latent_channels),
                         ("diffusion.T", self.diffusion.T),
                         ("sample.n_steps", self.sample.n_steps)]:
            if val < 1:
                raise ConfigError(f"{key} must be >= 1, got {val}")
        for key in ("l1", "edge", "lap", "eq"):
            if getattr(self.loss, key) < 0:
                raise ConfigError(f"loss.{key} must be >= 0")
        if self.data.size % (2 ** self.ae.stages):
            raise ConfigError(f"data.size {self.data.size} not divisible by 2**ae.stages")
        if self.mixing == "mixed" and self.data.domains != "mixed":
            raise ConfigError("mixing = 'mixed' needs data.domains = 'mixed'")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


FULL_PROFILE = {
    "data": {"size": 256},
    "ae": {"base_width": 64},
    "diffusion": {"base_width": 64, "temb_dim": 256, "epochs": 2500, "lr": 1e-5},
}


def _choice(key: str, val: str, accepted: tuple[str, ...]) -> None:
    if val not in accepted:
        raise ConfigError(f"{key} = {val!r} is not accepted; expected one of {list(accepted)}")


def _apply(obj, values: dict[str, Any], prefix: str = "") -> None:
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, val in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key '{prefix}{key}'; accepted keys: "
                              f"{sorted(names)}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise ConfigError(f"{prefix}{key} must be a section")
            _apply(cur, val, prefix=f"{prefix}{key}.")
        else:
            if isinstance(cur, bool) and not isinstance(val, bool):
                raise ConfigError(f"{prefix}{key} must be true or false")
            if isinstance(cur, float) and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if not isinstance(val, type(cur)):
                raise ConfigError(f"{prefix}{key} must be {type(cur).__name__}, "
                                  f"got {type(val).__name__}")
            setattr(obj, key, val)


def from_dict(values: dict[str, Any]) -> RunConfig:
    cfg = RunConfig()
    profile = values.get("profile", "desk")
    _choice("profile", profile, ("desk", "full"))
    if profile == "full":
        _apply(cfg, FULL_PROFILE)
    _apply(cfg, values)
    return cfg.validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    with open(path, "rb") as fh:
        try:
            values = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return from_dict(values)
