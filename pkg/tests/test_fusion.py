import numpy as np
import pytest

from streamasd.config import UNBOUNDED, ContextConfig
from streamasd.encoders import EmbeddingSequence
from streamasd.errors import ContextError, ShapeError
from streamasd.fusion import (
    build_context_mask,
    constrained_attention,
    fuse_embeddings,
    fusion_forward,
    gru_fusion_forward,
    gru_params,
    transformer_layer_forward,
)
from streamasd.model_io import init_random
from streamasd.oracle import bruteforce_attention, oracle_fusion

from conftest import tiny_config
from reference import scalar_gru_step


def _pair(rng, n, d=16):
    return (EmbeddingSequence(rng.standard_normal((n, d)), "audio"),
            EmbeddingSequence(rng.standard_normal((n, d)), "visual"))


class TestMask:
    @pytest.mark.parametrize(
        "ctx,expected",
        [
            (ContextConfig(UNBOUNDED, 0), np.tril(np.ones((4, 4)))),
            (ContextConfig(1, 1), np.eye(4) + np.eye(4, k=1) + np.eye(4, k=-1)),
            (ContextConfig(0, 0), np.eye(4)),
            (ContextConfig(UNBOUNDED, UNBOUNDED), np.ones((4, 4))),
            (ContextConfig(0, 2), np.triu(np.ones((4, 4))) - np.eye(4, k=3)),
        ],
    )
    def test_examples(self, ctx, expected):
        np.testing.assert_array_equal(build_context_mask(4, ctx).bits, expected.astype(bool))

    def test_row_range_clamps(self):
        m = build_context_mask(10, ContextConfig(3, 2))
        assert m.row_range(0) == (0, 2)
        assert m.row_range(5) == (2, 7)
        assert m.row_range(9) == (6, 9)

    def test_read_only(self):
        m = build_context_mask(3, ContextConfig(1, 1))
        with pytest.raises(ValueError):
            m.bits[0, 2] = True

    @pytest.mark.parametrize("n", [0, -1])
    def test_empty(self, n):
        with pytest.raises(ContextError):
            build_context_mask(n, ContextConfig(1, 1))

    @pytest.mark.parametrize("past,future", [(-1, 0), (0, 1.5), ("3", 0)])
    def test_bad_context(self, past, future):
        with pytest.raises(ContextError):
            ContextConfig(past, future)


class TestAttention:
    def test_single_survivor_returns_value(self, tiny, rng):
        cfg, p = tiny
        x = rng.standard_normal((6, 32))
        out = constrained_attention(x, build_context_mask(6, ContextConfig(0, 0)), p, head=1, config=cfg)
        w, b = p["fusion.layer0.v.weight"], p["fusion.layer0.v.bias"]
        np.testing.assert_allclose(out, (x @ w + b)[:, 8:16], atol=1e-5)

    def test_uniform_when_queries_vanish(self, tiny, rng):
        cfg, p = tiny
        p = dict(p)
        p["fusion.layer0.q.weight"] = np.zeros_like(p["fusion.layer0.q.weight"])
        x = rng.standard_normal((9, 32))
        out = constrained_attention(x, build_context_mask(9, ContextConfig(2, 1)), p, head=0, config=cfg)
        v = (x @ p["fusion.layer0.v.weight"] + p["fusion.layer0.v.bias"])[:, :8]
        for T in range(9):
            lo, hi = max(0, T - 2), min(8, T + 1)
            np.testing.assert_allclose(out[T], v[lo : hi + 1].mean(axis=0), atol=1e-5)

    def test_full_mask_is_plain_softmax(self, tiny, rng):
        cfg, p = tiny
        x = rng.standard_normal((7, 32))
        out = constrained_attention(x, build_context_mask(7, ContextConfig(UNBOUNDED, UNBOUNDED)), p, 2, cfg)
        lin = {n: x @ p[f"fusion.layer0.{n}.weight"] + p[f"fusion.layer0.{n}.bias"] for n in "qkv"}
        q, k, v = (lin[n][:, 16:24] for n in "qkv")
        s = q @ k.T / np.sqrt(8)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out, a @ v, atol=1e-5)

    @pytest.mark.parametrize("n,past,future", [(1, 0, 0), (5, 1, 3), (17, 4, 2), (32, UNBOUNDED, 0)])
    def test_matches_bruteforce(self, tiny, rng, n, past, future):
        cfg, p = tiny
        x = rng.standard_normal((n, 32))
        mask = build_context_mask(n, ContextConfig(past, future))
        got = np.concatenate([constrained_attention(x, mask, p, h, cfg) for h in range(4)], axis=1)
        np.testing.assert_allclose(got, bruteforce_attention(x, mask, p, cfg), atol=1e-6)

    def test_masked_keys_have_no_influence(self, tiny, rng):
        cfg, p = tiny
        x = rng.standard_normal((12, 32))
        mask = build_context_mask(12, ContextConfig(2, 1))
        base = constrained_attention(x, mask, p, 0, cfg)
        y = x.copy()
        y[9:] += 1e3
        np.testing.assert_allclose(constrained_attention(y, mask, p, 0, cfg)[:8], base[:8], atol=1e-6)

    def test_bad_head(self, tiny):
        cfg, p = tiny
        with pytest.raises(ShapeError):
            constrained_attention(np.zeros((3, 32)), build_context_mask(3, ContextConfig(1, 1)), p, 4, cfg)


class TestTransformer:
    def test_zero_input(self, tiny):
        cfg, p = tiny
        # layer-norm of zeros is its bias (zero at init), so every sublayer adds only biases
        out = transformer_layer_forward(np.zeros((4, 32)), build_context_mask(4, ContextConfig(1, 1)), p, cfg)
        np.testing.assert_allclose(out, 0.0, atol=1e-7)

    def test_position_independent(self, tiny, rng):
        cfg, p = tiny
        ctx = ContextConfig(2, 2)
        x = rng.standard_normal((20, 32))
        a = transformer_layer_forward(x, build_context_mask(20, ctx), p, cfg)
        b = transformer_layer_forward(x[5:15], build_context_mask(10, ctx), p, cfg)
        # rows whose band is not clipped by either sequence edge agree
        np.testing.assert_allclose(a[7:13], b[2:8], atol=1e-5)

    def test_unbounded_equals_unmasked(self, tiny, rng):
        cfg, p = tiny
        x = rng.standard_normal((9, 32))
        full = transformer_layer_forward(x, np.ones((9, 9), bool), p, cfg)
        band = transformer_layer_forward(x, build_context_mask(9, ContextConfig(UNBOUNDED, UNBOUNDED)), p, cfg)
        np.testing.assert_array_equal(full, band)

    @pytest.mark.parametrize("depth,rel", [(1, 0), (2, 0), (2, 3)])
    def test_matches_oracle(self, rng, depth, rel):
        cfg = tiny_config(depth=depth, rel_pos_max=rel)
        p = init_random(cfg, 3)
        e_a, e_v = _pair(rng, 25)
        ctx = ContextConfig(3, 2)
        np.testing.assert_allclose(
            fusion_forward(e_a, e_v, ctx, p, cfg), oracle_fusion(e_a.values, e_v.values, ctx, p, cfg), atol=1e-5
        )

    def test_band_invariance(self, rng):
        cfg = tiny_config(depth=2)
        p = init_random(cfg, 4)
        e_a, e_v = _pair(rng, 40)
        ctx = ContextConfig(3, 2)
        base = fusion_forward(e_a, e_v, ctx, p, cfg)
        T = 20
        # two layers see [T-6, T+4]
        for j in (13, 25, 0, 39):
            va = e_a.values.copy()
            va[j] += 50.0
            out = fusion_forward(EmbeddingSequence(va, "audio"), e_v, ctx, p, cfg)
            assert abs(out[T] - base[T]) <= 1e-7
        va = e_a.values.copy()
        va[14] += 50.0
        assert abs(fusion_forward(EmbeddingSequence(va, "audio"), e_v, ctx, p, cfg)[T] - base[T]) > 1e-6


class TestFuse:
    def test_concat(self, rng):
        e_a, e_v = _pair(rng, 3)
        f = fuse_embeddings(e_a, e_v)
        assert f.origin == "fused"
        np.testing.assert_array_equal(f.values[:, :16], e_a.values.astype(np.float32))

    def test_length_mismatch(self, rng):
        e_a, _ = _pair(rng, 3)
        _, e_v = _pair(rng, 4)
        with pytest.raises(ShapeError):
            fuse_embeddings(e_a, e_v)

    def test_swapped(self, rng):
        e_a, e_v = _pair(rng, 3)
        with pytest.raises(ShapeError):
            fuse_embeddings(e_v, e_a)


@pytest.fixture(scope="module")
def gru():
    cfg = tiny_config(kind="gru")
    return cfg, init_random(cfg, 8)


class TestGru:
    def test_scalar_oracle(self, gru, rng):
        cfg, p = gru
        e_a, e_v = _pair(rng, 6)
        out = gru_fusion_forward(e_a, e_v, p, cfg)
        x = np.concatenate([e_a.values, e_v.values], axis=1)
        gp = {k: np.asarray(v, np.float64) for k, v in gru_params(p).items()}
        h = np.zeros(8)
        for t in range(6):
            h = scalar_gru_step(x[t], h, gp)
            logit = h @ p["fusion.classifier.weight"][:, 0] + p["fusion.classifier.bias"][0]
            assert abs(out[t] - logit) < 1e-5

    def test_causal_prefix(self, gru, rng):
        cfg, p = gru
        e_a, e_v = _pair(rng, 15)
        full = gru_fusion_forward(e_a, e_v, p, cfg)
        for k in (1, 6):
            pa = EmbeddingSequence(e_a.values[:k], "audio")
            pv = EmbeddingSequence(e_v.values[:k], "visual")
            np.testing.assert_allclose(gru_fusion_forward(pa, pv, p, cfg), full[:k], atol=1e-6)

    def test_oracle(self, gru, rng):
        cfg, p = gru
        e_a, e_v = _pair(rng, 10)
        ref = oracle_fusion(e_a.values, e_v.values, ContextConfig(UNBOUNDED, 0), p, cfg)
        np.testing.assert_allclose(gru_fusion_forward(e_a, e_v, p, cfg), ref, atol=1e-5)
