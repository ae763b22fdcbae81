"""
All the domain models for triflow live here.
"""

from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    in_channels: int = Field(3, ge=1)
    downsample: int = 4
    feature_dim: int = Field(64, ge=1)
    corr_dim: int = Field(96, ge=1)
    flow_dim: int = Field(32, ge=1)
    motion_dim: int = Field(96, ge=1)
    hidden_dim: int = Field(64, ge=1)
    corr_levels: int = Field(2, ge=1)
    corr_radius: int = Field(3, ge=0)
    normalize_corr: bool = True
    large_kernel_updater: bool = False

    @field_validator("downsample")
    def downsample_is_power_of_two(cls, value: int) -> int:
        if value not in (1, 2, 4, 8):
            raise ValueError("downsample must be one of 1, 2, 4, 8")
        return value


class AblationFlags(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bidirectional: bool = True
    recurrent_fusion: bool = True
    mop: bool = True


class DataConfig(BaseModel):
    """Distribution the synthetic scenes are drawn from."""

    model_config = ConfigDict(extra="forbid")

    height: int = Field(64, ge=4)
    width: int = Field(64, ge=4)
    frame_count: int = Field(5, ge=3)
    channels: int = 3
    min_sprites: int = Field(1, ge=0)
    max_sprites: int = Field(3, ge=0)
    max_translation: float = Field(6.0, ge=0)
    max_rotation: float = Field(0.0, ge=0)
    background_motion: bool = False
    count: int = Field(16, ge=1)
    eval_count: int = Field(4, ge=1)

    @field_validator("channels")
    def channels_are_gray_or_rgb(cls, value: int) -> int:
        if value not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        return value

    @model_validator(mode="after")
    def sprite_range_is_ordered(self) -> "DataConfig":
        if self.min_sprites > self.max_sprites:
            raise ValueError("min_sprites must not exceed max_sprites")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iters: int = Field(12, ge=1)
    gamma: float = Field(0.85, gt=0, le=1)
    clip_length: int = Field(5, ge=3)
    lr: float = Field(2.5e-4, ge=0)
    warmup_fraction: float = Field(0.05, ge=0, lt=1)
    div_factor: float = Field(25.0, gt=0)
    final_div_factor: float = Field(1e4, gt=0)
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(2, ge=1)
    weight_decay: float = Field(1e-5, ge=0)
    clip_norm: float = Field(1.0, gt=0)
    seed: int = 0
    include_initial: bool = False
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    model: ModelConfig = ModelConfig()
    ablation: AblationFlags = AblationFlags()
    data: DataConfig = DataConfig()

    @property
    def centers(self) -> int:
        return self.clip_length - 2


class SpriteSpec(BaseModel):
    shape: Literal["rectangle", "ellipse"] = "rectangle"
    center: tuple[float, float]
    half_size: tuple[float, float]
    texture_seed: int = 0
    depth: int = 0
    translation: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0


class SceneSpec(BaseModel):
    height: int = Field(64, ge=1)
    width: int = Field(64, ge=1)
    channels: Literal[1, 3] = 3
    frame_count: int = 5
    background_seed: int = 0
    background_translation: tuple[float, float] = (0.0, 0.0)
    sprites: list[SpriteSpec] = []
    seed: int = 0


class MetricsReport(BaseModel):
    aepe: float
    fl_all: float
    pixels: int
    s0_10: float | None = None
    s10_40: float | None = None
    s40_plus: float | None = None
    matched: float | None = None
    unmatched: float | None = None


class EvaluationReport(BaseModel):
    forward: MetricsReport
    backward: MetricsReport
    backward_reversed: MetricsReport | None = None


class TensorEntry(BaseModel):
    name: str
    shape: tuple[int, ...]
    offset: int


class CheckpointHeader(BaseModel):
    version: int = 1
    config: str
    step: int
    seed: int
    rng_state: dict[str, Any]
    tensors: list[TensorEntry]


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: dict[str, np.ndarray]
    config: TrainConfig
    step: int = 0
    rng_state: dict[str, Any] = {}

    @property
    def seed(self) -> int:
        return self.config.seed


class AblationRun(BaseModel):
    name: str
    flags: AblationFlags
    report: EvaluationReport
