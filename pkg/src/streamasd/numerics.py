"""Dense float32 kernels used by the encoders and the fusion model.

Tensors are plain ``numpy.ndarray`` objects in float32.  Every kernel
validates shapes up front and rejects non-finite results, so a NaN can never
travel silently from one stage into the next.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

DTYPE = np.float32
# Attention scores and weights are accumulated at this precision.
ACC_DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"{op}: non-finite value in output")
    return x


def _vector(b, n: int, op: str) -> np.ndarray:
    if b is None:
        return np.zeros(n, dtype=DTYPE)
    b = as_tensor(b)
    if b.shape != (n,):
        raise ShapeError(f"{op}: bias shape {b.shape} != ({n},)")
    return b


def conv_time_last(x, weights, bias=None, left_pad: int = 0, right_pad: int = 0, stride: int = 1) -> np.ndarray:
    """Channels-last temporal convolution: ``(T, *rest, C_in) -> (T', *rest, C_out)``.

    Computed as one GEMM per kernel tap over time-shifted views, which avoids
    materialising an im2col buffer for the wide per-pixel activations.
    """
    x = as_tensor(x)
    w = as_tensor(weights)
    if x.ndim < 2 or w.ndim != 3:
        raise ShapeError(f"temporal_conv: bad ranks x{x.shape} w{w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"temporal_conv: x has {x.shape[-1]} channels, weights expect {c_in}")
    if left_pad < 0 or right_pad < 0 or stride < 1:
        raise ShapeError("temporal_conv: pads must be >= 0 and stride >= 1")
    b = _vector(bias, c_out, "temporal_conv")
    if left_pad or right_pad:
        x = np.pad(x, [(left_pad, right_pad)] + [(0, 0)] * (x.ndim - 1))
    if x.shape[0] < k:
        raise ShapeError(f"temporal_conv: padded length {x.shape[0]} shorter than kernel {k}")
    t_out = (x.shape[0] - k) // stride + 1
    span = (t_out - 1) * stride + 1
    out = None
    for j in range(k):
        tap = x[j : j + span : stride].reshape(-1, c_in) @ w[j]
        out = tap if out is None else out + tap
    out += b
    return check_finite(out.reshape((t_out,) + x.shape[1:-1] + (c_out,)), "temporal_conv")


def temporal_conv(
    x,
    weights,
    bias=None,
    left_pad: int = 0,
    right_pad: int = 0,
    stride: int = 1,
) -> np.ndarray:
    """1-D cross-correlation along axis 0.

    ``x`` has shape ``(T, C_in, *rest)``; trailing axes (e.g. spatial
    positions) are carried through untouched, so the same kernel serves the
    audio path ``(T, C)`` and the per-pixel temporal stage ``(T, C, H, W)``.
    ``weights`` is ``(K, C_in, C_out)``.  Padding is zero fill.  With
    ``right_pad == 0`` row ``t`` of the output only sees ``x[:t*stride+K-left_pad]``.

    Returns an array of shape ``(T', C_out, *rest)`` with
    ``T' = (T + left_pad + right_pad - K) // stride + 1``.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"temporal_conv: bad rank x{x.shape}")
    out = conv_time_last(np.moveaxis(x, 1, -1), weights, bias, left_pad, right_pad, stride)
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def conv2d_hwio(x: np.ndarray, w_hwio: np.ndarray, bias: np.ndarray, pad: int, stride: int) -> np.ndarray:
    """Channels-last 2-D convolution with weights already laid out ``(Kh, Kw, C_in, C_out)``.

    Patches are gathered tap by tap into one ``(T*Ho*Wo, Kh*Kw*C_in)`` buffer
    followed by a single GEMM.
    """
    kh, kw, c_in, c_out = w_hwio.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    t, h, w = x.shape[:3]
    if h < kh or w < kw:
        raise ShapeError("spatial_conv: image smaller than kernel")
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    cols = np.empty((t, ho, wo, kh, kw, c_in), dtype=DTYPE)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, :, dy, dx] = x[:, dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride]
    out = cols.reshape(t * ho * wo, -1) @ w_hwio.reshape(-1, c_out)
    out += bias
    return check_finite(out.reshape(t, ho, wo, c_out), "spatial_conv")


def conv2d_last(x, weights, bias=None, pad: int = 0, stride: int = 1) -> np.ndarray:
    """Channels-last per-frame 2-D convolution: ``(T, H, W, C_in) -> (T, Ho, Wo, C_out)``.

    ``weights`` keeps the ``(C_out, C_in, Kh, Kw)`` layout.
    """
    x = as_tensor(x)
    w = as_tensor(weights)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"spatial_conv: bad ranks x{x.shape} w{w.shape}")
    c_out, c_in = w.shape[:2]
    if x.shape[-1] != c_in:
        raise ShapeError(f"spatial_conv: x has {x.shape[-1]} channels, weights expect {c_in}")
    if pad < 0 or stride < 1:
        raise ShapeError("spatial_conv: pad must be >= 0 and stride >= 1")
    b = _vector(bias, c_out, "spatial_conv")
    return conv2d_hwio(x, np.ascontiguousarray(w.transpose(2, 3, 1, 0)), b, pad, stride)


def spatial_conv(x, weights, bias=None, pad: int = 0, stride: int = 1) -> np.ndarray:
    """Per-frame 2-D cross-correlation.

    ``x`` is ``(T, C_in, H, W)``, ``weights`` is ``(C_out, C_in, Kh, Kw)``.
    Frames never mix.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"spatial_conv: bad rank x{x.shape}")
    out = conv2d_last(x.transpose(0, 2, 3, 1), weights, bias, pad, stride)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def dense(x, weights, bias=None) -> np.ndarray:
    """Affine map over the last axis: ``x @ weights + bias``."""
    x = as_tensor(x)
    w = as_tensor(weights)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: x{x.shape} incompatible with weights{w.shape}")
    out = x @ w + _vector(bias, w.shape[1], "dense")
    return check_finite(out, "dense")


def masked_softmax(logits, mask, dtype=DTYPE) -> np.ndarray:
    """Softmax over the last axis restricted to entries where ``mask`` is set.

    Masked entries come out exactly 0.  Rows with no set entry are an error:
    they mean the caller built an invalid context mask.
    """
    z = np.ascontiguousarray(logits, dtype=dtype)
    try:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    except ValueError:
        raise ShapeError(f"masked_softmax: mask shape {np.shape(mask)} != logits {z.shape}") from None
    if not m.any(axis=-1).all():
        raise ShapeError("masked_softmax: a row has no unmasked entry")
    z = np.where(m, z, np.finfo(dtype).min)
    with np.errstate(over="ignore"):  # fill - max may round to -inf; exp gives 0 either way
        z = z - z.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(z), dtype(0.0))
    out = e / e.sum(axis=-1, keepdims=True)
    return check_finite(out.astype(dtype, copy=False), "masked_softmax")


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), DTYPE(0.0))


def sigmoid(x):
    """Logistic function, stable for large |x|.  Accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def global_avg_pool(x) -> np.ndarray:
    """Mean over the two trailing (spatial) axes."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool: need spatial axes, got {x.shape}")
    return check_finite(x.mean(axis=(-2, -1), dtype=DTYPE), "global_avg_pool")


def channel_affine(x, scale, shift) -> np.ndarray:
    """Per-channel ``scale * x + shift`` along axis 1 (a folded batch-norm)."""
    x = as_tensor(x)
    c = x.shape[1]
    s = _vector(scale, c, "channel_affine")
    h = _vector(shift, c, "channel_affine")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    return check_finite(x * s.reshape(bshape) + h.reshape(bshape), "channel_affine")


def affine_relu_last(x, scale, shift) -> np.ndarray:
    """``relu(scale * x + shift)`` with per-channel parameters on the last axis."""
    x = as_tensor(x)
    c = x.shape[-1]
    out = x * _vector(scale, c, "affine_relu") + _vector(shift, c, "affine_relu")
    np.maximum(out, DTYPE(0.0), out=out)
    return check_finite(out, "affine_relu")


def layer_norm(x, weight, bias, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    out = (x - mu) / np.sqrt(var + DTYPE(eps)) * _vector(weight, d, "layer_norm") + _vector(bias, d, "layer_norm")
    return check_finite(out.astype(DTYPE, copy=False), "layer_norm")


GRU_KEYS = ("wz", "wr", "wh", "uz", "ur", "uh", "bz", "br", "bh")


def gru_step(x, h, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """One step of a GRU cell.

    ``params`` holds input weights ``wz, wr, wh`` of shape ``(D_in, D_h)``,
    recurrent weights ``uz, ur, uh`` of shape ``(D_h, D_h)`` and biases
    ``bz, br, bh``.  The reset gate is applied to ``h`` before the recurrent
    product of the candidate::

        z  = sigmoid(x wz + h uz + bz)
        r  = sigmoid(x wr + h ur + br)
        h~ = tanh(x wh + (r * h) uh + bh)
        h' = (1 - z) * h~ + z * h
    """
    x = as_tensor(x)
    h = as_tensor(h)
    missing = [k for k in GRU_KEYS if k not in params]
    if missing:
        raise ShapeError(f"gru_step: missing parameters {missing}")
    d_in, d_h = np.shape(params["wz"])
    if x.shape[-1] != d_in or h.shape[-1] != d_h:
        raise ShapeError(f"gru_step: x{x.shape}/h{h.shape} vs weights ({d_in}, {d_h})")
    z = sigmoid(x @ params["wz"] + h @ params["uz"] + params["bz"]).astype(DTYPE)
    r = sigmoid(x @ params["wr"] + h @ params["ur"] + params["br"]).astype(DTYPE)
    cand = np.tanh(x @ params["wh"] + (r * h) @ params["uh"] + params["bh"])
    out = (DTYPE(1.0) - z) * cand + z * h
    return check_finite(out.astype(DTYPE, copy=False), "gru_step")
