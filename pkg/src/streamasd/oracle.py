"""Slow float64 reference implementations.

Nothing here calls into :mod:`streamasd.numerics`, the encoders or the fusion
module: convolutions are written as explicit per-tap shift-and-add over
zero-padded sequences, attention as a full masked score matrix (or a literal
double loop), and layer norm / GRU gates are spelled out.  Only parameter
loading and the config objects are shared with the production path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .config import ContextConfig, ModelConfig
from .errors import AlignmentError, ShapeError
from .frontend import FaceFrameSequence, MfccSequence, align_streams

F64 = np.float64
CHUNK = 8


def _p(params, name) -> np.ndarray:
    return np.asarray(params[name], dtype=F64)


def _affine_relu(y, params, prefix):
    # channels are the last axis
    return np.maximum(y * _p(params, prefix + ".weight") + _p(params, prefix + ".bias"), 0.0)


# -- encoders ----------------------------------------------------------------
# Activations are kept channels-last, (time, ..., C), in float64.


def _mm(a, w):
    # flatten to 2-D so the product is one plain matrix multiply
    return (a.reshape(-1, a.shape[-1]) @ w).reshape(a.shape[:-1] + (w.shape[1],))


def _spatial(x, w, b, stride):
    """x (n, H, W, C_in), w (C_out, C_in, k, k); zero 'same' padding."""
    n, h, wd, c_in = x.shape
    k = w.shape[2]
    pad = k // 2
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c_in))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    # patches stacked tap-major along the channel axis: [(0,0) C_in | (0,1) C_in | ...]
    patches = np.concatenate(
        [xp[:, dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride]
         for dy in range(k) for dx in range(k)],
        axis=-1,
    )
    wmat = w.transpose(2, 3, 1, 0).reshape(k * k * c_in, w.shape[0])
    return _mm(patches, wmat) + b


def _causal_taps(seq, w, b, n_out, stride=1):
    """``y[t] = b + sum_k seq[t*stride + k] @ w[k]`` along the leading axis.

    ``seq`` already carries its left history; ``w`` is (K, C_in, C_out).
    The K shifted copies are stacked on the channel axis for a single product.
    """
    K = w.shape[0]
    stacked = np.concatenate([seq[k : k + stride * (n_out - 1) + 1 : stride] for k in range(K)], axis=-1)
    return _mm(stacked, w.reshape(K * w.shape[1], w.shape[2])) + b


def oracle_visual(frames: np.ndarray, params: Mapping[str, np.ndarray], config: ModelConfig) -> np.ndarray:
    """(T, 1, H, W) face frames -> (T, D_m) float64, causal."""
    enc = config.encoder
    x_all = np.asarray(frames, dtype=F64)[:, 0, :, :, None]
    history: dict[str, np.ndarray] = {}
    out = []
    for c0 in range(0, x_all.shape[0], CHUNK):
        x = x_all[c0 : c0 + CHUNK]
        n = x.shape[0]
        for i, stride in enumerate(enc.spatial_strides):
            acc = 0.0
            for k in enc.branch_kernels:
                pre = f"visual.block{i}.branch{k}"
                s = _spatial(x, _p(params, pre + ".s_conv.weight"), _p(params, pre + ".s_conv.bias"), stride)
                s = _affine_relu(s, params, pre + ".s_norm")
                hist = history.get(pre)
                if hist is None:
                    hist = np.zeros((k - 1,) + s.shape[1:])
                seq = np.concatenate([hist, s])
                history[pre] = seq[seq.shape[0] - (k - 1) :]
                t = _causal_taps(seq, _p(params, pre + ".t_conv.weight"), _p(params, pre + ".t_conv.bias"), n)
                acc = acc + _affine_relu(t, params, pre + ".t_norm")
            x = acc
        pooled = x.sum(axis=(1, 2)) / (x.shape[1] * x.shape[2])
        out.append(pooled @ _p(params, "visual.proj.weight") + _p(params, "visual.proj.bias"))
    return np.concatenate(out)


def oracle_audio(mfcc: np.ndarray, params: Mapping[str, np.ndarray], config: ModelConfig) -> np.ndarray:
    """(T_a, n_mfcc) -> (T_a / R, D_m) float64, causal."""
    enc = config.encoder
    x = np.asarray(mfcc, dtype=F64)
    ka = enc.audio_kernel
    for i, stride in enumerate(enc.audio_strides):
        n = x.shape[0] // stride
        acc = 0.0
        for k in enc.branch_kernels:
            pre = f"audio.block{i}.branch{k}"
            seq = np.concatenate([np.zeros((ka - stride, x.shape[1])), x])
            s = _causal_taps(seq, _p(params, pre + ".s_conv.weight"), _p(params, pre + ".s_conv.bias"), n, stride)
            s = _affine_relu(s, params, pre + ".s_norm")
            seq = np.concatenate([np.zeros((k - 1, s.shape[1])), s])
            t = _causal_taps(seq, _p(params, pre + ".t_conv.weight"), _p(params, pre + ".t_conv.bias"), n)
            acc = acc + _affine_relu(t, params, pre + ".t_norm")
        x = acc
    return x @ _p(params, "audio.proj.weight") + _p(params, "audio.proj.bias")


def oracle_embeddings(x_a, x_v, params, config: ModelConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Aligned float64 ``(e_a, e_v)``."""
    config = config or ModelConfig()
    mfcc, faces = _aligned(x_a, x_v, config)
    return oracle_audio(mfcc, params, config), oracle_visual(faces, params, config)


def _aligned(x_a, x_v, config):
    if isinstance(x_a, MfccSequence) and isinstance(x_v, FaceFrameSequence):
        x_a, x_v, _ = align_streams(x_a, x_v)
        return x_a.frames, x_v.frames
    mfcc = x_a.frames if isinstance(x_a, MfccSequence) else np.asarray(x_a)
    faces = x_v.frames if isinstance(x_v, FaceFrameSequence) else np.asarray(x_v)
    if mfcc.shape[0] != config.encoder.audio_downsample * faces.shape[0]:
        raise AlignmentError(f"{mfcc.shape[0]} MFCC rows do not match {faces.shape[0]} frames")
    return mfcc, faces


# -- fusion ------------------------------------------------------------------


def _norm(x, params, prefix, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * _p(params, prefix + ".weight") + _p(params, prefix + ".bias")


def _band(n: int, ctx: ContextConfig) -> np.ndarray:
    m = np.zeros((n, n), dtype=bool)
    for T in range(n):
        lo = 0 if ctx.past == math.inf else max(0, T - int(ctx.past))
        hi = n - 1 if ctx.future == math.inf else min(n - 1, T + int(ctx.future))
        m[T, lo : hi + 1] = True
    return m


def _lin(x, params, prefix):
    return x @ _p(params, prefix + ".weight") + _p(params, prefix + ".bias")


def _full_attention(xn, band, params, layer, config):
    fus = config.fusion
    pre = f"fusion.layer{layer}"
    q, k, v = (_lin(xn, params, f"{pre}.{name}") for name in "qkv")
    n, dh = xn.shape[0], fus.d_head
    out = np.zeros_like(xn)
    rel = None
    if fus.rel_pos_max:
        table = _p(params, pre + ".rel_bias.weight")
        off = np.subtract.outer(np.arange(n), np.arange(n)).T  # off[T, t] = t - T
        rel = table[:, np.clip(off, -fus.rel_pos_max, fus.rel_pos_max) + fus.rel_pos_max]
    for h in range(fus.heads):
        cols = slice(h * dh, (h + 1) * dh)
        s = q[:, cols] @ k[:, cols].T / math.sqrt(dh)
        if rel is not None:
            s = s + rel[h]
        s = np.where(band, s, -np.inf)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, cols] = (e / e.sum(axis=1, keepdims=True)) @ v[:, cols]
    return out


def oracle_fusion(e_a: np.ndarray, e_v: np.ndarray, ctx: ContextConfig, params, config: ModelConfig | None = None) -> np.ndarray:
    """Float64 fusion logits from (possibly float64) embeddings."""
    config = config or ModelConfig()
    x = np.concatenate([np.asarray(e_a, F64), np.asarray(e_v, F64)], axis=1)
    if config.fusion.kind == "gru":
        return _oracle_gru(x, params)
    band = _band(x.shape[0], ctx)
    eps = config.fusion.norm_eps
    for layer in range(config.fusion.depth):
        pre = f"fusion.layer{layer}"
        h = x + _lin(_full_attention(_norm(x, params, pre + ".norm1", eps), band, params, layer, config), params, pre + ".o")
        ff = np.maximum(_lin(_norm(h, params, pre + ".norm2", eps), params, pre + ".ff1"), 0.0)
        x = h + _lin(ff, params, pre + ".ff2")
    return _lin(x, params, "fusion.classifier")[:, 0]


def _sig(v):
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def _oracle_gru(x, params) -> np.ndarray:
    """Explicit per-unit loop; slow but transparent."""
    g = {k: _p(params, "fusion.gru." + k) for k in ("wz", "wr", "wh", "uz", "ur", "uh", "bz", "br", "bh")}
    hidden = g["bz"].shape[0]
    h = [0.0] * hidden
    states = []
    for row in x:
        xz, xr, xh = row @ g["wz"], row @ g["wr"], row @ g["wh"]
        hv = np.array(h)
        hz, hr = hv @ g["uz"], hv @ g["ur"]
        z = [_sig(xz[j] + hz[j] + g["bz"][j]) for j in range(hidden)]
        r = [_sig(xr[j] + hr[j] + g["br"][j]) for j in range(hidden)]
        rh = np.array([r[j] * h[j] for j in range(hidden)]) @ g["uh"]
        cand = [math.tanh(xh[j] + rh[j] + g["bh"][j]) for j in range(hidden)]
        h = [(1.0 - z[j]) * cand[j] + z[j] * h[j] for j in range(hidden)]
        states.append(h)
    return _lin(np.array(states), params, "fusion.classifier")[:, 0]


def offline_forward(x_a, x_v, ctx: ContextConfig, params, config: ModelConfig | None = None) -> np.ndarray:
    """Whole-sequence logits: causal encoders, then fusion under the full band mask."""
    config = config or ModelConfig()
    e_a, e_v = oracle_embeddings(x_a, x_v, params, config)
    return oracle_fusion(e_a, e_v, ctx, params, config)


# -- attention by double loop --------------------------------------------------


def bruteforce_attention(x, mask, params, config: ModelConfig | None = None, layer: int = 0) -> np.ndarray:
    """All heads of banded attention over ``x`` (no norm, no output projection).

    For every query ``T`` and every admitted key ``t`` the score
    ``q_T . k_t / sqrt(d_head)`` is computed one pair at a time; the result is
    ``(n, d_model)``, head ``h`` occupying columns ``h*d_head:(h+1)*d_head``.
    """
    config = config or ModelConfig()
    fus = config.fusion
    x = np.asarray(x, dtype=F64)
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != fus.d_model or bits.shape != (n, n):
        raise ShapeError(f"bad shapes x={x.shape} mask={bits.shape}")
    pre = f"fusion.layer{layer}"
    q, k, v = (_lin(x, params, f"{pre}.{name}") for name in "qkv")
    dh = fus.d_head
    scale = 1.0 / math.sqrt(dh)
    y = np.zeros((n, fus.d_model))
    for h in range(fus.heads):
        cols = slice(h * dh, (h + 1) * dh)
        for T in range(n):
            scores = {}
            for t in range(n):
                if bits[T, t]:
                    scores[t] = float(np.dot(q[T, cols], k[t, cols])) * scale
            if not scores:
                raise ShapeError(f"mask row {T} admits no keys")
            top = max(scores.values())
            weights = {t: math.exp(s - top) for t, s in scores.items()}
            total = sum(weights.values())
            for t, w in weights.items():
                y[T, cols] += (w / total) * v[t, cols]
    return y


# -- comparison ------------------------------------------------------------------


@dataclass(frozen=True)
class CompareReport:
    max_abs_diff: float
    argmax_frame: int
    tol: float
    n: int

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tol

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_abs_diff={self.max_abs_diff:.3e} at frame {self.argmax_frame} (tol {self.tol:g}, {self.n} frames)"


def compare_streams(a, b, tol: float = 1e-5) -> CompareReport:
    a = np.asarray(a, dtype=F64)
    b = np.asarray(b, dtype=F64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare logits of shape {a.shape} and {b.shape}")
    if a.size == 0:
        return CompareReport(0.0, -1, tol, 0)
    diff = np.abs(a - b)
    diff[np.isnan(diff)] = np.inf
    k = int(np.argmax(diff))
    return CompareReport(float(diff[k]), k, tol, int(a.size))
