"""Configuration and result records shared across the package."""

import os
from enum import Enum
from typing import Any, Literal, Optional, Type, TypeVar

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from stream_tracker.tensor import StreamTrackerError

DEFAULT_LOG_LEVEL = "INFO"

ABLATION_TOGGLES = (
    "memory_bank",
    "sensory",
    "query_projector",
    "feature_fusion",
    "warm_hidden",
    "warm_flow",
    "warm_vis",
    "seed_bank",
)

ConfigT = TypeVar("ConfigT", bound=BaseModel)


class ConfigError(StreamTrackerError):
    """Invalid configuration (bad field values, unknown ablation names, degenerate scenes)."""

    pass


def default_log_level() -> str:
    """Return log level from env or default."""
    return os.environ.get("STREAM_TRACKER_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()


def default_threads() -> int:
    """Worker cap from env (STREAM_TRACKER_THREADS), at least 1."""
    raw = os.environ.get("STREAM_TRACKER_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_config(model_cls: Type[ConfigT], data: Optional[dict[str, Any]] = None, **kwargs: Any) -> ConfigT:
    """Validate `data`/`kwargs` into `model_cls`, raising ConfigError instead of ValidationError."""
    payload = dict(data or {})
    payload.update(kwargs)
    try:
        return model_cls.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__}: {e}") from e


class SplatMode(str, Enum):
    """Normalization used when forward-warping memory values."""

    SUMMATION = "summation"
    AVERAGE = "average"
    LINEAR = "linear"
    SOFTMAX = "softmax"


class ModelConfig(BaseModel):
    """Widths, iteration counts and ablation toggles of the streaming tracker."""

    feature_dim: int = Field(128, ge=1, description="D, width of F_t.")
    context_dim: int = Field(64, ge=1, description="D_c, width of the context feature.")
    key_dim: Optional[int] = Field(None, ge=1, description="D_k; defaults to feature_dim.")
    motion_dim: int = Field(128, ge=1, description="D_m, motion feature width.")
    hidden_dim: int = Field(96, ge=1, description="D_h, decoder GRU hidden width.")
    sensory_dim: int = Field(64, ge=1, description="D_s, sensory memory width.")
    encoder_widths: tuple[int, int] = Field((64, 96), description="Channel widths of the two encoder stages.")
    corr_levels: int = Field(4, ge=1, description="Correlation pyramid levels.")
    corr_radius: int = Field(3, ge=0, description="Lookup radius r.")
    memory_length: int = Field(3, ge=1, description="L, memory bank capacity in frames.")
    train_iters: int = Field(12, ge=0, description="Decoder iterations during training.")
    eval_iters: int = Field(16, ge=0, description="Decoder iterations at inference.")
    fusion_kernel: int = Field(3, ge=1, description="Kernel size of the fusion convolution (odd).")
    softmax_alpha: float = Field(10.0, gt=0, description="Importance scale for softmax splatting.")
    splat_mode: SplatMode = Field(SplatMode.LINEAR, description="Splatting used for memory values.")
    init_vis_logit: float = Field(10.0, description="Visibility logit of the reference frame.")
    detach_lookup: bool = Field(True, description="Stop gradients through the correlation lookup coordinates.")
    dtype: Literal["float32", "float64"] = Field("float32", description="Compute dtype.")
    memory_bank: bool = True
    sensory: bool = True
    query_projector: bool = True
    feature_fusion: bool = True
    warm_hidden: bool = True
    warm_flow: bool = True
    warm_vis: bool = True
    seed_bank: bool = True

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.fusion_kernel % 2 == 0:
            raise ValueError("fusion_kernel must be odd")
        if not self.query_projector and self.key_dim not in (None, self.feature_dim):
            raise ValueError("key_dim must equal feature_dim when the query projector is ablated")
        return self

    @property
    def effective_key_dim(self) -> int:
        if not self.query_projector:
            return self.feature_dim
        return self.key_dim or self.feature_dim

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @classmethod
    def toy(cls, **overrides: Any) -> "ModelConfig":
        """Desk-scale preset (D=32) used by tests and acceptance runs."""
        base = dict(
            feature_dim=32,
            context_dim=32,
            motion_dim=32,
            hidden_dim=32,
            sensory_dim=16,
            encoder_widths=(16, 24),
            corr_levels=3,
            corr_radius=2,
        )
        base.update(overrides)
        return build_config(cls, base)

    def with_ablations(self, names: list[str]) -> "ModelConfig":
        """Copy with the named toggles switched off."""
        unknown = [n for n in names if n not in ABLATION_TOGGLES]
        if unknown:
            raise ConfigError(
                f"Unknown ablation toggle(s) {unknown}; valid toggles: {', '.join(ABLATION_TOGGLES)}"
            )
        return build_config(ModelConfig, self.model_dump(), **{n: False for n in names})


class TrainConfig(BaseModel):
    """Optimization settings for toy-scale training."""

    model: ModelConfig = Field(default_factory=ModelConfig.toy)
    video_length: int = Field(24, ge=2, description="Frames used from each training sequence.")
    learning_rate: float = Field(4e-4, ge=0, description="Peak learning rate of the one-cycle schedule.")
    steps: int = Field(1000, ge=1, description="Optimizer steps.")
    batch_size: int = Field(1, ge=1, description="Sequences per step.")
    gamma: float = Field(0.8, gt=0, le=1, description="Per-iteration loss discount.")
    vis_weight: float = Field(1.0, ge=0, description="Weight of the visibility BCE term.")
    bptt_window: int = Field(4, ge=1, description="Frames per truncated-backprop window.")
    clip_norm: float = Field(1.0, gt=0, description="Global gradient-norm clip.")
    weight_decay: float = Field(1e-5, ge=0, description="Decoupled weight decay.")
    warmup_fraction: float = Field(0.05, ge=0, lt=1, description="Share of steps spent warming up.")
    log_every: int = Field(10, ge=1, description="Loss is logged every K steps.")
    checkpoint_every: int = Field(0, ge=0, description="Periodic checkpoint interval; 0 disables.")
    seed: int = Field(0, ge=0, description="Seed for initialization and batch order.")


class SceneConfig(BaseModel):
    """Synthetic layered scene."""

    height: int = Field(64, ge=4, description="Canvas height in pixels.")
    width: int = Field(64, ge=4, description="Canvas width in pixels.")
    num_objects: tuple[int, int] = Field((2, 4), description="Inclusive range of object count.")
    size_range: tuple[float, float] = Field((12.0, 28.0), description="Object side length range (px).")
    velocity_range: tuple[float, float] = Field((0.5, 2.5), description="Per-axis speed range (px/frame).")
    velocities: Optional[list[tuple[float, float]]] = Field(
        None, description="Explicit (vx, vy) per object, back to front; overrides velocity_range."
    )
    rotation: bool = Field(False, description="Rotate objects about their centers.")
    max_angular_velocity: float = Field(0.05, ge=0, description="Rad/frame bound when rotation is on.")
    frames: int = Field(24, ge=1, description="Sequence length T.")
    seed: int = Field(0, ge=0, description="Generator seed.")

    @model_validator(mode="after")
    def _check_ranges(self) -> "SceneConfig":
        for name in ("num_objects", "size_range", "velocity_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
            if lo < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.size_range[0] <= 0:
            raise ValueError("size_range must be positive")
        if self.velocities is not None and len(self.velocities) < self.num_objects[1]:
            raise ValueError(f"velocities lists {len(self.velocities)} objects, num_objects allows up to {self.num_objects[1]}")
        return self


class FlowMetrics(BaseModel):
    """Dense flow accuracy; region means are None when the region is empty."""

    epe_all: float = Field(..., ge=0)
    epe_vis: Optional[float] = Field(None, ge=0)
    epe_occ: Optional[float] = Field(None, ge=0)
    oa: float = Field(..., ge=0, le=1)


class TapMetrics(BaseModel):
    """Query-point accuracy; None when undefined (no scored points)."""

    aj: Optional[float] = Field(None, ge=0, le=1)
    delta_avg: Optional[float] = Field(None, ge=0, le=1)
    oa: Optional[float] = Field(None, ge=0, le=1)
    jaccard_by_threshold: dict[str, Optional[float]] = Field(default_factory=dict)
    within_by_threshold: dict[str, Optional[float]] = Field(default_factory=dict)


class SequenceEvaluation(BaseModel):
    """Metrics over frames 2..T and over the last frame only."""

    frames: FlowMetrics
    last_frame: FlowMetrics


class GradCheckReport(BaseModel):
    op_name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tolerance: float


class RunManifest(BaseModel):
    """Written before a CLI command starts work."""

    command: str
    config: dict[str, Any] = Field(default_factory=dict)
    seed: int
    threads: int
    version: str
    output_dir: str


class EvaluationReport(BaseModel):
    """Per-sequence and aggregate metrics of a prediction directory."""

    sequences: dict[str, SequenceEvaluation] = Field(default_factory=dict)
    aggregate: FlowMetrics
    tap: Optional[TapMetrics] = None
