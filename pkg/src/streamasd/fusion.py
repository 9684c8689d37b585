"""Audio-visual fusion with a context-banded transformer or a forward GRU.

Frame ``T`` may attend to frames ``[T - past, T + future]`` (clamped to the
sequence).  There is no positional encoding by default, so a layer's output
for a row depends only on the rows inside its band, which is what lets the
streaming runtime recompute a short window and reproduce the offline result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .config import UNBOUNDED, ContextConfig, ModelConfig
from .encoders import EmbeddingSequence
from .errors import ContextError, ShapeError

__all__ = [
    "UNBOUNDED",
    "ContextConfig",
    "ContextMask",
    "band_bits",
    "build_context_mask",
    "constrained_attention",
    "multi_head_attention",
    "transformer_layer_forward",
    "fuse_embeddings",
    "fusion_forward",
    "gru_fusion_forward",
    "predict_logits",
]

QUERY_BLOCK = 256


@dataclass(frozen=True)
class ContextMask:
    n: int
    bits: np.ndarray  # (n, n) bool; bits[T, t] set iff t may inform T

    def row_range(self, T: int) -> tuple[int, int]:
        idx = np.flatnonzero(self.bits[T])
        return int(idx[0]), int(idx[-1])


def band_bits(query_pos, key_pos, ctx: ContextConfig) -> np.ndarray:
    """Mask bits between absolute query and key positions."""
    d = np.asarray(key_pos)[None, :] - np.asarray(query_pos)[:, None]
    return (d >= -ctx.past) & (d <= ctx.future)


def build_context_mask(n: int, ctx: ContextConfig) -> ContextMask:
    """Band matrix ``M[T, t] = 1  iff  T - past <= t <= T + future``."""
    if n < 1:
        raise ContextError("mask length must be >= 1")
    pos = np.arange(n)
    bits = band_bits(pos, pos, ctx)
    bits.flags.writeable = False
    return ContextMask(n, bits)


def _bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, ContextMask) else np.asarray(mask, dtype=bool)


def _layer(params: Mapping[str, np.ndarray], layer: int, name: str) -> tuple[np.ndarray, np.ndarray]:
    p = f"fusion.layer{layer}.{name}"
    return params[p + ".weight"], params[p + ".bias"]


def _rel_bias(params, layer: int, q_pos, k_pos, rel_pos_max: int) -> np.ndarray | None:
    if not rel_pos_max:
        return None
    table = params[f"fusion.layer{layer}.rel_bias.weight"]  # (heads, 2R+1)
    off = np.clip(np.asarray(k_pos)[None, :] - np.asarray(q_pos)[:, None], -rel_pos_max, rel_pos_max)
    return table[:, off + rel_pos_max]  # (heads, n_q, n_k)


def _proj(x: np.ndarray, params, layer: int, name: str, cols=slice(None)) -> np.ndarray:
    # float64 accumulation; float32 dot products over d_model drift by ~1e-6
    w, b = _layer(params, layer, name)
    return x.astype(nx.ACC_DTYPE) @ w[:, cols].astype(nx.ACC_DTYPE) + b[cols]


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, bits: np.ndarray, bias=None) -> np.ndarray:
    """``q``: (h, n_q, d), ``k``/``v``: (h, n_k, d), ``bits``: (n_q, n_k)."""
    logits = q @ np.swapaxes(k, -1, -2) * (1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        logits = logits + bias
    return nx.masked_softmax(logits, bits, nx.ACC_DTYPE) @ v


def multi_head_attention(
    x: np.ndarray,
    mask,
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    layer: int = 0,
    query_rows=None,
    positions=None,
) -> np.ndarray:
    """Banded self-attention over ``x`` (already normalized), before the output projection.

    ``query_rows`` selects which rows of ``x`` act as queries (all by
    default); ``mask`` is then ``(len(query_rows), len(x))``.  ``positions``
    are the absolute frame indices of ``x``'s rows, used only by the optional
    relative-position bias.  Returns ``(n_q, d_model)``.
    """
    fus = config.fusion
    x = nx.as_tensor(x)
    n, d = x.shape
    rows = np.arange(n) if query_rows is None else np.asarray(query_rows)
    pos = np.arange(n) if positions is None else np.asarray(positions)
    bits = _bits(mask)
    if bits.shape != (len(rows), n):
        raise ShapeError(f"mask shape {bits.shape} != ({len(rows)}, {n})")
    h, dh = fus.heads, fus.d_head

    def split(t):
        return t.reshape(t.shape[0], h, dh).transpose(1, 0, 2)

    k = split(_proj(x, params, layer, "k"))
    v = split(_proj(x, params, layer, "v"))
    out = np.empty((len(rows), d), dtype=nx.DTYPE)
    for r0 in range(0, len(rows), QUERY_BLOCK):
        sel = rows[r0 : r0 + QUERY_BLOCK]
        q = split(_proj(x[sel], params, layer, "q"))
        bias = _rel_bias(params, layer, pos[sel], pos, fus.rel_pos_max)
        y = _attend(q, k, v, bits[r0 : r0 + QUERY_BLOCK], bias)
        out[r0 : r0 + len(sel)] = y.transpose(1, 0, 2).reshape(len(sel), d)
    return out


def constrained_attention(
    x: np.ndarray,
    mask,
    params: Mapping[str, np.ndarray],
    head: int,
    config: ModelConfig | None = None,
    layer: int = 0,
) -> np.ndarray:
    """Output of a single attention head, shape ``(n, d_head)``.

    Scaled dot-product attention of each query over the keys its mask row
    admits; masked keys get exactly zero weight.
    """
    config = config or ModelConfig()
    fus = config.fusion
    if not 0 <= head < fus.heads:
        raise ShapeError(f"head {head} out of range for {fus.heads} heads")
    x = nx.as_tensor(x)
    bits = _bits(mask)
    if bits.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"mask shape {bits.shape} does not match {x.shape[0]} rows")
    cols = slice(head * fus.d_head, (head + 1) * fus.d_head)

    q, k, v = (_proj(x, params, layer, name, cols)[None] for name in "qkv")
    pos = np.arange(x.shape[0])
    bias = _rel_bias(params, layer, pos, pos, fus.rel_pos_max)
    out = _attend(q, k, v, bits, None if bias is None else bias[head : head + 1])[0]
    return nx.check_finite(out.astype(nx.DTYPE), "attention")


def transformer_layer_forward(
    x: np.ndarray,
    mask,
    params: Mapping[str, np.ndarray],
    config: ModelConfig | None = None,
    layer: int = 0,
    query_rows=None,
    positions=None,
) -> np.ndarray:
    """Pre-norm residual block: ``h = x + MHA(norm1(x))``; ``h + FFN(norm2(h))``.

    With ``query_rows`` only those rows are produced, attending over all of
    ``x`` under ``mask`` of shape ``(len(query_rows), len(x))``.
    """
    config = config or ModelConfig()
    eps = config.fusion.norm_eps
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != config.fusion.d_model:
        raise ShapeError(f"fusion input must be (n, {config.fusion.d_model}), got {x.shape}")
    xn = nx.layer_norm(x, *_layer(params, layer, "norm1"), eps=eps)
    attn = multi_head_attention(xn, mask, params, config, layer, query_rows, positions)
    resid = x if query_rows is None else x[np.asarray(query_rows)]
    h = resid + nx.dense(attn, *_layer(params, layer, "o"))
    ff = nx.relu(nx.dense(nx.layer_norm(h, *_layer(params, layer, "norm2"), eps=eps), *_layer(params, layer, "ff1")))
    return nx.check_finite(h + nx.dense(ff, *_layer(params, layer, "ff2")), "transformer_layer")


def fuse_embeddings(e_a: EmbeddingSequence, e_v: EmbeddingSequence) -> EmbeddingSequence:
    """Per-frame concatenation ``[e_a | e_v]``."""
    if e_a.origin != "audio" or e_v.origin != "visual":
        raise ShapeError(f"expected (audio, visual) embeddings, got ({e_a.origin}, {e_v.origin})")
    if len(e_a) != len(e_v):
        raise ShapeError(f"embedding lengths differ: audio {len(e_a)} vs visual {len(e_v)}")
    return EmbeddingSequence(np.concatenate([e_a.values, e_v.values], axis=1).astype(nx.DTYPE), "fused")


def classify(x: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
    return nx.dense(x, params["fusion.classifier.weight"], params["fusion.classifier.bias"])[:, 0]


def fusion_forward(
    e_a: EmbeddingSequence,
    e_v: EmbeddingSequence,
    ctx: ContextConfig,
    params: Mapping[str, np.ndarray],
    config: ModelConfig | None = None,
) -> np.ndarray:
    """Per-frame speaking logits from the banded transformer, shape ``(T_v,)``."""
    config = config or ModelConfig()
    if config.fusion.kind != "transformer":
        raise ShapeError("fusion_forward needs a transformer fusion config")
    x = fuse_embeddings(e_a, e_v).values
    mask = build_context_mask(x.shape[0], ctx)
    for i in range(config.fusion.depth):
        x = transformer_layer_forward(x, mask, params, config, layer=i)
    return classify(x, params)


def gru_params(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: params[f"fusion.gru.{k}"] for k in nx.GRU_KEYS}


def gru_fusion_forward(
    e_a: EmbeddingSequence,
    e_v: EmbeddingSequence,
    params: Mapping[str, np.ndarray],
    config: ModelConfig | None = None,
) -> np.ndarray:
    """Forward-only GRU over the fused sequence; logit ``T`` sees frames ``0..T``."""
    config = config or ModelConfig(fusion=_gru_default())
    x = fuse_embeddings(e_a, e_v).values
    gp = gru_params(params)
    h = np.zeros(config.fusion.gru_hidden, dtype=nx.DTYPE)
    states = np.empty((x.shape[0], h.shape[0]), dtype=nx.DTYPE)
    for t in range(x.shape[0]):
        h = nx.gru_step(x[t], h, gp)
        states[t] = h
    return classify(states, params)


def _gru_default():
    from .config import FusionConfig

    return FusionConfig(kind="gru")


def predict_logits(e_a, e_v, ctx: ContextConfig | None, params, config: ModelConfig) -> np.ndarray:
    """Dispatch on ``config.fusion.kind``."""
    if config.fusion.kind == "gru":
        return gru_fusion_forward(e_a, e_v, params, config)
    return fusion_forward(e_a, e_v, ctx if ctx is not None else config.ctx, params, config)
