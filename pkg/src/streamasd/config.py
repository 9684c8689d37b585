"""Model, encoder, fusion, frontend and context configuration."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigError, ContextError

UNBOUNDED = math.inf


def _count(value, name: str):
    if value is None or value == UNBOUNDED:
        return UNBOUNDED
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ContextError(f"{name} must be a non-negative integer or UNBOUNDED, got {value!r}")
    return value


@dataclass(frozen=True)
class ContextConfig:
    """Past (``T1``) and future (``T2``) frame bounds of the attention band."""

    past: int | float = UNBOUNDED
    future: int | float = UNBOUNDED

    def __post_init__(self):
        object.__setattr__(self, "past", _count(self.past, "past"))
        object.__setattr__(self, "future", _count(self.future, "future"))

    @property
    def bounded(self) -> bool:
        return self.past != UNBOUNDED and self.future != UNBOUNDED

    def scaled(self, depth: int) -> "ContextConfig":
        """Effective context of ``depth`` stacked layers."""
        return ContextConfig(self.past * depth, self.future * depth)

    def to_json(self) -> dict:
        return {k: (None if v == UNBOUNDED else v) for k, v in asdict(self).items()}

    def __str__(self) -> str:
        def fmt(v):
            return "inf" if v == UNBOUNDED else str(v)

        return f"({fmt(self.past)}, {fmt(self.future)})"


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 3
    branch_kernels: tuple[int, ...] = (3, 5)
    channels: tuple[int, ...] = (32, 64, 128)
    embed_dim: int = 128
    spatial_kernel: int = 3
    # Visual per-block spatial stride; 112 -> 56 -> 28 -> 14 with the defaults.
    spatial_strides: tuple[int, ...] = (2, 2, 2)
    # Audio per-block temporal stride of the 3-tap front convolution.
    audio_strides: tuple[int, ...] = (2, 2, 1)
    audio_kernel: int = 3
    causal: bool = True

    def __post_init__(self):
        for name in ("branch_kernels", "channels", "spatial_strides", "audio_strides"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def audio_downsample(self) -> int:
        return math.prod(self.audio_strides)

    @property
    def receptive_field(self) -> tuple[int, int]:
        """(past, future) frames seen by one visual embedding."""
        k = max(self.branch_kernels) - 1
        if self.causal:
            return self.n_blocks * k, 0
        return self.n_blocks * (k // 2), self.n_blocks * (k // 2)

    def temporal_pads(self, kernel: int) -> tuple[int, int]:
        if self.causal:
            return kernel - 1, 0
        return (kernel - 1) // 2, (kernel - 1) // 2

    def validate(self) -> None:
        if self.n_blocks < 1:
            raise ConfigError("encoder.n_blocks must be >= 1")
        for name in ("channels", "spatial_strides", "audio_strides"):
            if len(getattr(self, name)) != self.n_blocks:
                raise ConfigError(f"encoder.{name} needs one entry per block")
        if not self.branch_kernels or any(k < 1 for k in self.branch_kernels):
            raise ConfigError("encoder.branch_kernels must be positive")
        if not self.causal and any(k % 2 == 0 for k in self.branch_kernels):
            raise ConfigError("symmetric padding needs odd temporal kernels")
        if self.spatial_kernel % 2 == 0:
            raise ConfigError("encoder.spatial_kernel must be odd")
        positive = (self.embed_dim, self.spatial_kernel, self.audio_kernel)
        if min(positive) < 1 or min(self.channels) < 1:
            raise ConfigError("encoder dimensions must be positive")
        if min(self.spatial_strides) < 1 or min(self.audio_strides) < 1:
            raise ConfigError("encoder strides must be positive")
        if any(s > self.audio_kernel for s in self.audio_strides):
            raise ConfigError("audio stride larger than audio kernel would skip frames")


@dataclass(frozen=True)
class FusionConfig:
    kind: str = "transformer"  # "transformer" | "gru"
    depth: int = 1
    heads: int = 8
    d_model: int = 256
    d_ff: int = 1024
    gru_hidden: int = 128
    # >0 adds a learned per-head bias over key-query offsets clipped to [-R, R].
    rel_pos_max: int = 0
    norm_eps: float = 1e-5

    def validate(self) -> None:
        if self.kind not in ("transformer", "gru"):
            raise ConfigError(f"fusion.kind must be 'transformer' or 'gru', got {self.kind!r}")
        if min(self.depth, self.heads, self.d_model, self.d_ff, self.gru_hidden) < 1:
            raise ConfigError("fusion dimensions must be positive")
        if self.d_model % self.heads:
            raise ConfigError("fusion.d_model must be divisible by fusion.heads")
        if self.rel_pos_max < 0:
            raise ConfigError("fusion.rel_pos_max must be >= 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    n_mfcc: int = 13
    n_mels: int = 40
    window_s: float = 0.025
    hop_s: float = 0.010
    preemphasis: float = 0.97
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    fps: float = 25.0
    image_size: int = 112
    pixel_mean: float = 0.45
    pixel_std: float = 0.225

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_s * self.sample_rate))

    @property
    def n_fft(self) -> int:
        n = 1
        while n < self.window_samples:
            n *= 2
        return n

    @property
    def mfcc_per_video_frame(self) -> int:
        ratio = 1.0 / (self.fps * self.hop_s)
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(f"hop {self.hop_s}s does not divide the video frame period")
        return int(round(ratio))

    def validate(self) -> None:
        if self.n_mfcc < 1 or self.n_mels < self.n_mfcc:
            raise ConfigError("need 1 <= n_mfcc <= n_mels")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ConfigError("mel band edges must satisfy 0 <= f_min < f_max <= sr/2")
        if self.hop_samples < 1 or self.window_samples < self.hop_samples:
            raise ConfigError("window must be at least one hop long")
        if self.image_size < 1 or self.pixel_std <= 0:
            raise ConfigError("bad image normalization constants")
        self.mfcc_per_video_frame


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    ctx: ContextConfig = field(default_factory=lambda: ContextConfig(32, 8))

    def validate(self) -> "ModelConfig":
        self.encoder.validate()
        self.fusion.validate()
        self.frontend.validate()
        if self.fusion.d_model != 2 * self.encoder.embed_dim:
            raise ConfigError(
                f"fusion.d_model ({self.fusion.d_model}) must equal 2 * encoder.embed_dim "
                f"({2 * self.encoder.embed_dim})"
            )
        if self.encoder.audio_downsample != self.frontend.mfcc_per_video_frame:
            raise ConfigError(
                f"audio encoder downsamples by {self.encoder.audio_downsample} but there are "
                f"{self.frontend.mfcc_per_video_frame} MFCC frames per video frame"
            )
        return self

    def with_causal(self, causal: bool) -> "ModelConfig":
        return replace(self, encoder=replace(self.encoder, causal=causal))

    def to_dict(self) -> dict:
        return {
            "encoder": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.encoder).items()},
            "fusion": asdict(self.fusion),
            "frontend": asdict(self.frontend),
            "ctx": self.ctx.to_json(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {"encoder", "fusion", "frontend", "ctx"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config sections: {sorted(extra)}")
        try:
            cfg = cls(
                encoder=EncoderConfig(**data.get("encoder", {})),
                fusion=FusionConfig(**data.get("fusion", {})),
                frontend=FrontendConfig(**data.get("frontend", {})),
                ctx=ContextConfig(**data["ctx"]) if "ctx" in data else ContextConfig(32, 8),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from None
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)
