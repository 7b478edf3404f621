"""Flat JSON run configuration shared by every CLI command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .model import ModelConfig
from .train import OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    channels: str = "ms"
    # synthetic scenes
    source_size: int = 1024
    target_size: int = 1024
    n_plots: int = 1064
    pixel_size: float = 10.0
    scene_config: Optional[str] = None
    source_mean_height: float = 10.8
    target_mean_height: float = 15.0
    target_gain: float = 1.10
    target_offset_sd: float = 1.5
    # patches
    patch_size: int = 256
    min_forest_fraction: float = 0.20
    test_fraction: float = 0.5
    val_fraction: float = 0.1
    finetune_val_fraction: float = 0.1
    pretrain_multiplier: float = 1433 / 246
    finetune_multiplier: float = 8.0
    shift_step: int = 32
    # model
    base_width: int = 32
    depth: int = 4
    se_reduction: int = 8
    # optimisation
    max_lr: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs_pretrain: int = 100
    epochs_finetune: int = 5
    warmup_fraction: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    freeze_bn_stats: bool = False
    # baselines and evaluation
    knn_k: int = 5
    knn_weighting: str = "inverse_distance"
    plot_lookup: str = "center"
    predict_margin: Optional[int] = None
    figures: bool = True
    # paths
    source_dir: Optional[str] = None
    target_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    finetuned_checkpoint: Optional[str] = None
    out: Optional[str] = None

    def __post_init__(self):
        if self.channels not in ("s2", "s1s2", "ms"):
            raise ConfigError(f"channels must be s2, s1s2 or ms, got {self.channels!r}")
        if self.plot_lookup not in ("center", "footprint"):
            raise ConfigError("plot_lookup must be 'center' or 'footprint'")
        if self.patch_size % (2 ** self.depth):
            raise ConfigError(f"patch_size {self.patch_size} not divisible by 2**depth")
        try:
            self.model_config(1)
            self.optimizer()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self, in_channels: int) -> ModelConfig:
        return ModelConfig(in_channels, self.base_width, self.depth, self.se_reduction, self.seed)

    def optimizer(self, seed_offset: int = 0) -> OptimizerConfig:
        return OptimizerConfig(
            max_lr=self.max_lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
            epochs_pretrain=self.epochs_pretrain, epochs_finetune=self.epochs_finetune,
            warmup_fraction=self.warmup_fraction, div_factor=self.div_factor,
            final_div_factor=self.final_div_factor, seed=self.seed + seed_offset)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def override(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


# desk-scale settings used by the test-suite and the example config
REDUCED = dict(
    source_size=256, target_size=256, patch_size=32, shift_step=8,
    base_width=8, depth=2, se_reduction=4, epochs_pretrain=40,
)
