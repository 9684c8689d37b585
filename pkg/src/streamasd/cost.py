"""Closed-form latency / memory accounting for context configurations.

Latency is the wait for future frames: ``(encoder_future + fusion_future)``
frame periods.  Memory counts stored past frames only, at a fixed
``bytes_per_frame`` (512 KiB by default), or one frame for a uni-directional
GRU.  Anything needing unbounded context reports :data:`UNBOUNDED`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .config import UNBOUNDED, ContextConfig
from .errors import ConfigError

KINDS = ("transformer", "uni-gru", "bi-gru")
GRID_HEADER = ("past", "future", "latency_ms", "memory_bytes")


@dataclass(frozen=True)
class CostConfig:
    fps: float = 25.0
    bytes_per_frame: int = 524_288
    encoder_future: int = 0
    ctx: ContextConfig = field(default_factory=lambda: ContextConfig(32, 8))
    kind: str = "transformer"

    def __post_init__(self):
        if not self.fps > 0:
            raise ConfigError("fps must be > 0")
        if self.bytes_per_frame <= 0:
            raise ConfigError("bytes_per_frame must be > 0")
        if self.encoder_future < 0:
            raise ConfigError("encoder_future must be >= 0")
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")


def _future(cfg: CostConfig):
    if cfg.kind == "bi-gru":
        return UNBOUNDED
    if cfg.kind == "uni-gru":
        return 0
    return cfg.ctx.future


def latency_ms(cfg: CostConfig):
    """Milliseconds from a frame's arrival until its score can be produced."""
    fut = _future(cfg)
    if fut == UNBOUNDED:
        return UNBOUNDED
    frames = cfg.encoder_future + fut
    ms = frames * 1000 / cfg.fps
    return int(ms) if float(ms).is_integer() else ms


def memory_bytes(cfg: CostConfig):
    if cfg.kind == "bi-gru":
        return UNBOUNDED
    if cfg.kind == "uni-gru":
        return cfg.bytes_per_frame
    if cfg.ctx.past == UNBOUNDED:
        return UNBOUNDED
    return int(cfg.ctx.past) * cfg.bytes_per_frame


def sweep_grid(past_range: Iterable[int], future_range: Iterable[int], cfg: CostConfig | None = None) -> list[tuple]:
    """``(past, future, latency_ms, memory_bytes)`` for every pair, past-major."""
    cfg = cfg or CostConfig()
    pasts, futures = list(past_range), list(future_range)
    if not pasts or not futures:
        raise ConfigError("sweep ranges must be non-empty")
    rows = []
    for p in pasts:
        for f in futures:
            c = replace(cfg, ctx=ContextConfig(p, f), kind="transformer")
            rows.append((p, f, latency_ms(c), memory_bytes(c)))
    return rows


def _cell(v):
    return "inf" if v == UNBOUNDED else str(v)


def grid_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_HEADER)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def parse_range(text: str) -> range:
    """``"A"`` or ``"A:B"`` (inclusive) -> range."""
    try:
        parts = [int(p) for p in text.split(":")]
    except ValueError:
        raise ConfigError(f"bad range {text!r}; expected A or A:B") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or parts[0] < 0 or parts[1] < parts[0]:
        raise ConfigError(f"bad range {text!r}; expected A or A:B with 0 <= A <= B")
    return range(parts[0], parts[1] + 1)
