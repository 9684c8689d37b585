"""Frame-by-frame inference with bounded state.

A session keeps two kinds of state:

* the conv tails of both encoders (the last ``K - 1`` activations of every
  temporal convolution, zero at the start like the training-time padding);
* a ring of the last ``L*T1 + L*T2 + 1`` fused embeddings.

Frame ``T`` is emitted once frame ``T + L*T2`` has been pushed.  Attention is
recomputed over the ring window on every emission; keys and values are not
cached.  With ``L`` layers, layer ``l`` (1-based) only needs query rows
``[T - (L-l)*T1, T + (L-l)*T2]``, so the window shrinks towards ``T``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import numerics as nx
from .config import ContextConfig, ModelConfig
from .encoders import AudioEncoder, VisualEncoder
from .errors import ContextError, SessionError, ShapeError
from .fusion import band_bits, classify, gru_params, transformer_layer_forward
from .model_io import param_bytes


@dataclass
class Emission:
    frame_index: int
    logit: float
    probability: float
    visual_aux_probability: float
    # microseconds: frontend_us, encoder_us, attention_us, total_us
    wall_time: dict = field(default_factory=dict)


class EmbeddingRing:
    """Fixed-capacity ring of rows addressed by absolute frame index."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ContextError("ring capacity must be >= 1")
        self.capacity = capacity
        self.data = np.zeros((capacity, dim), dtype=nx.DTYPE)
        self.count = 0

    def append(self, row: np.ndarray) -> None:
        self.data[self.count % self.capacity] = row
        self.count += 1

    def rows(self, start: int, stop: int) -> np.ndarray:
        """Rows for frames ``start .. stop-1`` (must still be retained)."""
        if start < max(0, self.count - self.capacity) or stop > self.count or start > stop:
            raise SessionError(f"frames [{start}, {stop}) not in ring holding [{max(0, self.count - self.capacity)}, {self.count})")
        return self.data[np.arange(start, stop) % self.capacity]

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


class EncoderStream:
    """Both encoders run incrementally; one fused embedding per pushed frame."""

    def __init__(self, params: Mapping[str, np.ndarray], config: ModelConfig):
        if not config.encoder.causal:
            raise ShapeError("streaming requires causal encoders")
        self.config = config
        self.visual = VisualEncoder(params, config)
        self.audio = AudioEncoder(params, config)
        self.v_state = self.visual.new_state()
        self.a_state = self.audio.new_state()
        size = config.frontend.image_size
        self.face_shape = (size, size)
        self.mfcc_rows = config.encoder.audio_downsample
        self.aux_w = params["visual.aux.weight"]
        self.aux_b = params["visual.aux.bias"]

    def encode(self, face, mfcc) -> tuple[np.ndarray, float]:
        """Returns the fused ``(d_model,)`` row and the visual-aux logit."""
        face = nx.as_tensor(face)
        if face.shape[-2:] != self.face_shape or face.size != self.face_shape[0] * self.face_shape[1]:
            raise ShapeError(f"face must be one {self.face_shape} frame, got {face.shape}")
        mfcc = nx.as_tensor(mfcc)
        n_mfcc = self.config.frontend.n_mfcc
        if mfcc.shape != (self.mfcc_rows, n_mfcc):
            raise ShapeError(f"expected {self.mfcc_rows} MFCC rows of {n_mfcc}, got {mfcc.shape}")
        e_v = self.visual.step(face.reshape(1, 1, *self.face_shape), self.v_state)
        e_a = self.audio.step(mfcc, self.a_state)
        aux = float(nx.dense(e_v, self.aux_w, self.aux_b)[0, 0])
        return np.concatenate([e_a[0], e_v[0]]), aux

    @property
    def nbytes(self) -> int:
        tails = list(self.v_state.values()) + list(self.a_state.values())
        return sum(t.nbytes for t in tails)


class FusionWindow:
    """Temporal head over a stream of fused embeddings.

    ``push`` takes one fused row (plus its aux logit) and returns the
    ``(frame_index, logit, aux_logit)`` triples that became final.
    """

    def __init__(self, params: Mapping[str, np.ndarray], config: ModelConfig, ctx: ContextConfig | None):
        self.params = params
        self.config = config
        self.depth = config.fusion.depth
        self.frames_seen = 0
        self.next_emit = 0
        self.gru = config.fusion.kind == "gru"
        d = config.fusion.d_model
        if self.gru:
            self.ctx = ctx
            self.h = np.zeros(config.fusion.gru_hidden, dtype=nx.DTYPE)
            self.gp = gru_params(params)
            self.ring = None
            return
        if ctx is None or not ctx.bounded:
            raise ContextError(f"streaming needs a bounded context, got {ctx}")
        self.ctx = ctx
        eff = ctx.scaled(self.depth)
        self.lag = int(eff.future)
        self.ring = EmbeddingRing(int(eff.past) + self.lag + 1, d)
        self.aux = EmbeddingRing(self.ring.capacity, 1)

    @property
    def capacity(self) -> int:
        return 0 if self.ring is None else self.ring.capacity

    def push(self, row: np.ndarray, aux: float) -> list[tuple[int, float, float]]:
        self.frames_seen += 1
        if self.gru:
            self.h = nx.gru_step(row, self.h, self.gp)
            self.next_emit += 1
            return [(self.frames_seen - 1, float(classify(self.h[None], self.params)[0]), aux)]
        self.ring.append(row)
        self.aux.append(np.array([aux], dtype=nx.DTYPE))
        out = []
        target = self.frames_seen - 1 - self.lag
        if target >= 0:
            out.append(self._emit(target))
        return out

    def flush(self) -> list[tuple[int, float, float]]:
        out = []
        while self.next_emit < self.frames_seen:
            out.append(self._emit(self.next_emit))
        return out

    def _emit(self, T: int) -> tuple[int, float, float]:
        # Final-layer logits for frame T from the rows currently available.
        past, fut = int(self.ctx.past), int(self.ctx.future)
        L, last = self.depth, self.frames_seen - 1
        lo, hi = max(0, T - L * past), min(last, T + L * fut)
        pos = np.arange(lo, hi + 1)
        x = self.ring.rows(lo, hi + 1)
        for layer in range(L):
            keep = L - 1 - layer
            q = (pos >= T - keep * past) & (pos <= T + keep * fut)
            qpos = pos[q]
            x = transformer_layer_forward(
                x, band_bits(qpos, pos, self.ctx), self.params, self.config,
                layer=layer, query_rows=np.flatnonzero(q), positions=pos,
            )
            pos = qpos
        logit = float(classify(x, self.params)[0])
        aux = float(self.aux.rows(T, T + 1)[0, 0])
        self.next_emit = T + 1
        return T, logit, aux

    @property
    def nbytes(self) -> int:
        return self.h.nbytes if self.gru else self.ring.nbytes + self.aux.nbytes


def _emission(frame: int, logit: float, aux: float, timing: dict) -> Emission:
    return Emission(frame, logit, nx.sigmoid(logit), nx.sigmoid(aux), timing)


class StreamSession:
    """One face track, fed one video frame and ``R`` MFCC rows at a time."""

    def __init__(self, params: Mapping[str, np.ndarray], config: ModelConfig, ctx: ContextConfig | None = None):
        config.validate()
        ctx = config.ctx if ctx is None else ctx
        self.config = config
        self.ctx = ctx
        self.window = FusionWindow(params, config, ctx)
        self.encoder = EncoderStream(params, config)
        self._param_bytes = param_bytes(params.values())
        self.closed = False

    @property
    def frames_seen(self) -> int:
        return self.window.frames_seen

    @property
    def next_emit(self) -> int:
        return self.window.next_emit

    @property
    def capacity(self) -> int:
        return self.window.capacity

    def push(self, face, mfcc, frontend_us: float = 0.0) -> list[Emission]:
        if self.closed:
            raise SessionError("session is closed")
        t0 = time.perf_counter_ns()
        row, aux = self.encoder.encode(face, mfcc)
        t1 = time.perf_counter_ns()
        ready = self.window.push(row, aux)
        t2 = time.perf_counter_ns()
        enc_us, att_us = (t1 - t0) / 1e3, (t2 - t1) / 1e3
        timing = {"frontend_us": frontend_us, "encoder_us": enc_us, "attention_us": att_us,
                  "total_us": frontend_us + enc_us + att_us}
        return [_emission(*r, timing) for r in ready]

    def flush(self) -> list[Emission]:
        if self.closed:
            raise SessionError("session already flushed")
        self.closed = True
        t0 = time.perf_counter_ns()
        ready = self.window.flush()
        att_us = (time.perf_counter_ns() - t0) / 1e3 / max(1, len(ready))
        timing = {"frontend_us": 0.0, "encoder_us": 0.0, "attention_us": att_us, "total_us": att_us}
        return [_emission(*r, dict(timing)) for r in ready]

    def memory_footprint(self) -> dict[str, int]:
        parts = {
            "conv_tails": self.encoder.nbytes,
            "embed_ring": 0 if self.window.gru else self.window.nbytes,
            "recurrent_state": self.window.nbytes if self.window.gru else 0,
            "params": self._param_bytes,
        }
        parts["total"] = sum(parts.values())
        return parts


def open_session(params: Mapping[str, np.ndarray], ctx: ContextConfig | None = None, config: ModelConfig | None = None) -> StreamSession:
    """New session; ``ctx`` must be bounded for transformer fusion."""
    return StreamSession(params, config or ModelConfig(), ctx)


class FanoutSession:
    """One encoder stream feeding several fusion windows (one per context).

    Equivalent to running a :class:`StreamSession` per context on the same
    input, but the encoders run once.
    """

    def __init__(self, params: Mapping[str, np.ndarray], config: ModelConfig, contexts: Iterable[ContextConfig]):
        config.validate()
        self.encoder = EncoderStream(params, config)
        self.windows = {c: FusionWindow(params, config, c) for c in contexts}
        self.closed = False

    def push(self, face, mfcc) -> dict[ContextConfig, list[Emission]]:
        if self.closed:
            raise SessionError("session is closed")
        row, aux = self.encoder.encode(face, mfcc)
        return {c: [_emission(*r, {}) for r in w.push(row, aux)] for c, w in self.windows.items()}

    def flush(self) -> dict[ContextConfig, list[Emission]]:
        if self.closed:
            raise SessionError("session already flushed")
        self.closed = True
        return {c: [_emission(*r, {}) for r in w.flush()] for c, w in self.windows.items()}


def run_stream(session, faces: np.ndarray, mfcc: np.ndarray):
    """Push a whole aligned sequence then flush; returns all emissions in order.

    Works for :class:`StreamSession` (list) and :class:`FanoutSession` (dict).
    """
    r = mfcc.shape[0] // faces.shape[0]
    if isinstance(session, FanoutSession):
        out = {c: [] for c in session.windows}
        for i in range(faces.shape[0]):
            for c, ems in session.push(faces[i], mfcc[i * r : (i + 1) * r]).items():
                out[c].extend(ems)
        for c, ems in session.flush().items():
            out[c].extend(ems)
        return out
    out = []
    for i in range(faces.shape[0]):
        out.extend(session.push(faces[i], mfcc[i * r : (i + 1) * r]))
    out.extend(session.flush())
    return out
