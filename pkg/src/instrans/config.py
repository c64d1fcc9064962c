"""Run configuration: one flat key/value namespace over network, training and data settings.

Config files are flat TOML (``key = value`` lines, no tables).  Command-line
flags override file values, which override the chosen profile.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Tuple

import tomli

from .losses import LossWeights
from .networks import NetConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    out: Optional[str] = None
    data_X: Optional[str] = None
    data_Y: Optional[str] = None
    resolution: Tuple[int, int] = (64, 64)
    min_instance_area: int = 8
    # network
    base_channels: int = 16
    n_res_blocks: int = 2
    n_downsample: int = 2
    discriminator_layers: int = 5
    use_instance_norm: bool = True
    use_spectral_norm_D: bool = True
    mask_capacity: int = 4
    # training
    lambda_cyc: float = 10.0
    lambda_idt: float = 10.0
    lambda_ctx: float = 10.0
    lr_G: float = 2e-4
    lr_D: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs_const: int = 30
    epochs_decay: int = 30
    sample_batch: int = 1
    instance_batch_size: int = 2
    pool_size: int = 50
    checkpoint_every: int = 10
    sample_dump_every: int = 10

    def net_config(self) -> NetConfig:
        return NetConfig(self.base_channels, self.n_res_blocks, self.n_downsample, self.discriminator_layers,
                         self.use_instance_norm, self.use_spectral_norm_D, self.mask_capacity)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            weights=LossWeights(self.lambda_cyc, self.lambda_idt, self.lambda_ctx),
            lr_G=self.lr_G, lr_D=self.lr_D, adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
            epochs_const=self.epochs_const, epochs_decay=self.epochs_decay, sample_batch=self.sample_batch,
            instance_batch_size=self.instance_batch_size, mask_capacity=self.mask_capacity,
            pool_size=self.pool_size, seed=self.seed, checkpoint_every=self.checkpoint_every,
            sample_dump_every=self.sample_dump_every,
        )

    def validate(self):
        """Raise ValueError on inconsistent settings (by building the sub-configs)."""
        self.net_config()
        self.train_config()
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ValueError("resolution must be two positive integers")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    def echo(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


# desk: small enough for a workstation CPU; paper: the full-size architecture and schedule
PROFILES = {
    "desk": {},
    "paper": {
        "resolution": (200, 200),
        "base_channels": 64,
        "n_res_blocks": 9,
        "epochs_const": 100,
        "epochs_decay": 100,
        "sample_batch": 4,
    },
}

FIELD_NAMES = {f.name for f in fields(RunConfig)}


def read_config_file(path) -> dict:
    with open(path, "rb") as f:
        raw = tomli.load(f)
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"config file must be flat; found tables {nested}")
    unknown = set(raw) - FIELD_NAMES
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return raw


def resolve(profile: str = "desk", file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Profile defaults, then config-file values, then explicit overrides."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    profile = overrides.get("profile", file_values.get("profile", profile))
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    values = {**PROFILES[profile], **file_values, **overrides, "profile": profile}
    if "resolution" in values:
        values["resolution"] = tuple(values["resolution"])
    return RunConfig(**values).validate()


def write_resolved(config: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(config.echo() + "\n")
    return path
