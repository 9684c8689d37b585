"""Causal two-branch audio and visual encoders.

Each block runs parallel branches (temporal kernels 3 and 5 by default) and
sums them.  A branch is a "front" convolution followed by a temporal
convolution, each followed by a per-channel affine and ReLU:

* visual: front = 3x3 spatial conv (stride 2 per block), temporal conv per pixel
* audio:  front = 3-tap temporal conv over the 100 Hz MFCC axis (stride 2 in
  blocks 0-1, so four MFCC rows collapse into one video-rate row)

In causal mode every temporal convolution is padded on the left only, so
embedding ``t`` depends on video frames ``<= t`` and MFCC rows ``<= 4t+3``.
The same :class:`ConvTail` objects back both the chunked full-sequence pass
and frame-by-frame streaming.

At construction the affines are folded into the preceding convolution and
the branches' front convolutions are concatenated into one GEMM.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .errors import ShapeError
from .frontend import FaceFrameSequence, MfccSequence

VISUAL_CHUNK = 16


@dataclass
class EmbeddingSequence:
    values: np.ndarray  # (T_v, D)
    origin: str  # "audio" | "visual" | "fused"

    def __len__(self) -> int:
        return self.values.shape[0]


class ConvTail:
    """Pending input rows of one causally streamed temporal convolution.

    Starts as ``left_pad`` zero rows (the training-time padding) and keeps
    whatever the next output window still needs: ``K - 1`` rows at stride 1.
    Layout is channels-last: ``(rows, *frame_shape, C_in)``.

    For stride 1 the rows live in a fixed ring indexed from ``head`` (the
    oldest row), so single-frame pushes never copy the history.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int, left_pad: int, frame_shape: tuple[int, ...]):
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.kernel = weight.shape[0]
        self.buf = np.zeros((left_pad, *frame_shape, weight.shape[1]), dtype=nx.DTYPE)
        self.head = 0
        self._ring = stride == 1 and left_pad == self.kernel - 1 and left_pad > 0
        self._empty = np.zeros((0, *frame_shape, weight.shape[2]), dtype=nx.DTYPE)

    def _ordered(self) -> np.ndarray:
        return np.roll(self.buf, -self.head, axis=0) if self.head else self.buf

    def feed(self, x: np.ndarray) -> np.ndarray:
        if self._ring and x.shape[0] == 1:
            return self._feed_one(x)
        buf = self._ordered()
        self.head = 0
        cat = np.concatenate([buf, x]) if buf.shape[0] else np.ascontiguousarray(x)
        k, s = self.kernel, self.stride
        if cat.shape[0] < k:
            self.buf = cat
            return self._empty
        n = (cat.shape[0] - k) // s + 1
        out = nx.conv_time_last(cat[: (n - 1) * s + k], self.weight, self.bias, stride=s)
        self.buf = cat[n * s :].copy()
        return out

    def _feed_one(self, x: np.ndarray) -> np.ndarray:
        k, c_in = self.kernel, self.weight.shape[1]
        size = k - 1
        row = x[0].reshape(-1, c_in)
        out = None
        for j in range(size):
            tap = self.buf[(self.head + j) % size].reshape(-1, c_in) @ self.weight[j]
            out = tap if out is None else np.add(out, tap, out=out)
        out += row @ self.weight[k - 1]
        out += self.bias
        self.buf[self.head] = x[0]
        self.head = (self.head + 1) % size
        return nx.check_finite(out.reshape(x.shape[:-1] + (self.weight.shape[2],)), "temporal_conv")

    @property
    def nbytes(self) -> int:
        return self.buf.nbytes


def _fold(weight, bias, scale, shift, out_axis: int):
    """Fold ``scale * (conv + bias) + shift`` into one convolution."""
    shape = [1] * np.ndim(weight)
    shape[out_axis] = -1
    w = np.asarray(weight, np.float32) * np.asarray(scale, np.float32).reshape(shape)
    b = np.asarray(bias, np.float32) * scale + shift
    return np.ascontiguousarray(w, dtype=np.float32), np.asarray(b, dtype=np.float32)


@dataclass
class _Block:
    front_w: np.ndarray  # branches concatenated on C_out; visual is (Kh, Kw, C_in, C_out)
    front_b: np.ndarray
    t_w: list  # per branch (K, C, C)
    t_b: list
    channels: int
    stride: int


def _compile(params: Mapping[str, np.ndarray], config: ModelConfig, modality: str) -> list[_Block]:
    enc = config.encoder
    strides = enc.spatial_strides if modality == "visual" else enc.audio_strides
    front_axis = 0 if modality == "visual" else 2
    blocks = []
    for i, (c, stride) in enumerate(zip(enc.channels, strides)):
        fws, fbs, tws, tbs = [], [], [], []
        for k in enc.branch_kernels:
            pre = f"{modality}.block{i}.branch{k}"
            fw, fb = _fold(params[pre + ".s_conv.weight"], params[pre + ".s_conv.bias"],
                           params[pre + ".s_norm.weight"], params[pre + ".s_norm.bias"], front_axis)
            tw, tb = _fold(params[pre + ".t_conv.weight"], params[pre + ".t_conv.bias"],
                           params[pre + ".t_norm.weight"], params[pre + ".t_norm.bias"], 2)
            fws.append(fw)
            fbs.append(fb)
            tws.append(tw)
            tbs.append(tb)
        front_w = np.concatenate(fws, axis=front_axis)
        if modality == "visual":
            front_w = np.ascontiguousarray(front_w.transpose(2, 3, 1, 0))  # (Kh, Kw, C_in, C_out)
        blocks.append(_Block(front_w, np.concatenate(fbs), tws, tbs, c, stride))
    return blocks


def _relu_(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, nx.DTYPE(0.0), out=x)


def visual_feature_shapes(config: ModelConfig) -> list[tuple[int, int, int]]:
    """(H, W, C) after each visual block's spatial convolution."""
    enc = config.encoder
    size, pad, k = config.frontend.image_size, enc.spatial_kernel // 2, enc.spatial_kernel
    shapes = []
    for c, s in zip(enc.channels, enc.spatial_strides):
        size = (size + 2 * pad - k) // s + 1
        shapes.append((size, size, c))
    return shapes


class _Encoder:
    modality = ""

    def __init__(self, params: Mapping[str, np.ndarray], config: ModelConfig):
        self.params = params
        self.config = config
        self.enc = config.encoder
        self.blocks = _compile(params, config, self.modality)
        self.proj_w = params[f"{self.modality}.proj.weight"]
        self.proj_b = params[f"{self.modality}.proj.bias"]

    def _temporal(self, s: np.ndarray, blk: _Block, j: int, tails, key: str) -> np.ndarray:
        k = blk.t_w[j].shape[0]
        if tails is None:
            lp, rp = self.enc.temporal_pads(k)
            return nx.conv_time_last(s, blk.t_w[j], blk.t_b[j], lp, rp)
        return tails[key].feed(s)


class VisualEncoder(_Encoder):
    modality = "visual"

    def new_state(self) -> dict[str, ConvTail]:
        if not self.enc.causal:
            raise ShapeError("streaming requires a causal encoder")
        tails = {}
        for i, (blk, shape) in enumerate(zip(self.blocks, visual_feature_shapes(self.config))):
            for j, k in enumerate(self.enc.branch_kernels):
                tails[f"block{i}.branch{k}"] = ConvTail(blk.t_w[j], blk.t_b[j], 1, k - 1, shape[:2])
        return tails

    def _trunk(self, x: np.ndarray, tails) -> np.ndarray:
        pad = self.enc.spatial_kernel // 2
        for i, blk in enumerate(self.blocks):
            s = _relu_(nx.conv2d_hwio(x, blk.front_w, blk.front_b, pad, blk.stride))
            acc = None
            for j, k in enumerate(self.enc.branch_kernels):
                sj = s[..., j * blk.channels : (j + 1) * blk.channels]
                t = _relu_(self._temporal(sj, blk, j, tails, f"block{i}.branch{k}"))
                acc = t if acc is None else np.add(acc, t, out=acc)
            x = acc
        pooled = x.mean(axis=(1, 2), dtype=nx.DTYPE)
        return nx.dense(pooled, self.proj_w, self.proj_b)

    def step(self, frames: np.ndarray, state: dict[str, ConvTail]) -> np.ndarray:
        """Encode the next ``n`` frames ``(n, 1, H, W)`` of a stream -> ``(n, D_m)``."""
        x = nx.as_tensor(frames)
        return self._trunk(x.reshape(x.shape[0], x.shape[2], x.shape[3], 1), state)

    def forward(self, frames: np.ndarray) -> np.ndarray:
        x = nx.as_tensor(frames)
        size = self.config.frontend.image_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (size, size):
            raise ShapeError(f"visual input must be (T, 1, {size}, {size}), got {x.shape}")
        if x.shape[0] == 0:
            raise ShapeError("visual input has no frames")
        if not self.enc.causal:
            return self._trunk(x.reshape(x.shape[0], size, size, 1), None)
        state = self.new_state()
        return np.concatenate([self.step(x[i : i + VISUAL_CHUNK], state) for i in range(0, x.shape[0], VISUAL_CHUNK)])


class AudioEncoder(_Encoder):
    modality = "audio"

    def new_state(self) -> dict[str, ConvTail]:
        if not self.enc.causal:
            raise ShapeError("streaming requires a causal encoder")
        tails = {}
        ka = self.enc.audio_kernel
        for i, blk in enumerate(self.blocks):
            tails[f"block{i}.front"] = ConvTail(blk.front_w, blk.front_b, blk.stride, ka - blk.stride, ())
            for j, k in enumerate(self.enc.branch_kernels):
                tails[f"block{i}.branch{k}"] = ConvTail(blk.t_w[j], blk.t_b[j], 1, k - 1, ())
        return tails

    def _trunk(self, x: np.ndarray, tails) -> np.ndarray:
        ka = self.enc.audio_kernel
        for i, blk in enumerate(self.blocks):
            if tails is None:
                half = (ka - 1) // 2
                s = nx.conv_time_last(x, blk.front_w, blk.front_b, half, half, blk.stride)
            else:
                s = tails[f"block{i}.front"].feed(x)
            s = _relu_(s)
            acc = None
            for j, k in enumerate(self.enc.branch_kernels):
                sj = s[:, j * blk.channels : (j + 1) * blk.channels]
                t = _relu_(self._temporal(sj, blk, j, tails, f"block{i}.branch{k}"))
                acc = t if acc is None else np.add(acc, t, out=acc)
            x = acc
        return nx.dense(x, self.proj_w, self.proj_b)

    def step(self, mfcc: np.ndarray, state: dict[str, ConvTail]) -> np.ndarray:
        """Encode the next ``R*n`` MFCC rows of a stream -> ``(n, D_m)``."""
        return self._trunk(nx.as_tensor(mfcc), state)

    def forward(self, mfcc: np.ndarray) -> np.ndarray:
        x = nx.as_tensor(mfcc)
        n_mfcc, r = self.config.frontend.n_mfcc, self.enc.audio_downsample
        if x.ndim != 2 or x.shape[1] != n_mfcc:
            raise ShapeError(f"audio input must be (T_a, {n_mfcc}), got {x.shape}")
        if x.shape[0] == 0 or x.shape[0] % r:
            raise ShapeError(f"T_a={x.shape[0]} is not a positive multiple of {r}; align streams first")
        if not self.enc.causal:
            return self._trunk(x, None)
        return self.step(x, self.new_state())


def visual_forward(x_v, params: Mapping[str, np.ndarray], config: ModelConfig | None = None) -> EmbeddingSequence:
    """Visual embeddings, one row per video frame."""
    config = config or ModelConfig()
    frames = x_v.frames if isinstance(x_v, FaceFrameSequence) else x_v
    return EmbeddingSequence(VisualEncoder(params, config).forward(frames), "visual")


def audio_forward(x_a, params: Mapping[str, np.ndarray], config: ModelConfig | None = None) -> EmbeddingSequence:
    """Audio embeddings at video rate (input rows / 4)."""
    config = config or ModelConfig()
    frames = x_a.frames if isinstance(x_a, MfccSequence) else x_a
    return EmbeddingSequence(AudioEncoder(params, config).forward(frames), "audio")


def visual_aux_score(e_v: EmbeddingSequence, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Raw per-frame logits of the visual-only auxiliary head, shape ``(T,)``."""
    if e_v.origin != "visual":
        raise ShapeError(f"auxiliary head takes visual embeddings, got {e_v.origin!r}")
    return nx.dense(e_v.values, params["visual.aux.weight"], params["visual.aux.bias"])[:, 0]


def measure_receptive_field(
    forward_fn: Callable[[np.ndarray], np.ndarray],
    T: int,
    frame_shape: tuple[int, ...],
    center: int | None = None,
    seed: int = 0,
    threshold: float = 1e-7,
    scale: float = 1e3,
) -> tuple[int, int]:
    """Empirical (past, future) extent of ``forward_fn`` around one output row.

    ``forward_fn`` maps a ``(T, *frame_shape)`` input to a ``(T, ...)``
    output.  Each input frame is perturbed in turn by a large random offset;
    the largest offsets (before/after ``center``) whose perturbation moves
    output row ``center`` by more than ``threshold`` are returned.
    """
    rng = np.random.default_rng(seed)
    center = T // 2 if center is None else center
    base = rng.standard_normal((T, *frame_shape)).astype(np.float32)
    ref = np.asarray(forward_fn(base))[center]
    past = future = 0
    for j in range(T):
        probe = base.copy()
        probe[j] += scale * rng.standard_normal(frame_shape).astype(np.float32)
        diff = np.max(np.abs(np.asarray(forward_fn(probe))[center] - ref))
        if diff > threshold:
            if j < center:
                past = max(past, center - j)
            elif j > center:
                future = max(future, j - center)
    return past, future
