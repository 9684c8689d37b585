import numpy as np
import pytest

from streamasd.encoders import (
    AudioEncoder,
    EmbeddingSequence,
    VisualEncoder,
    audio_forward,
    measure_receptive_field,
    visual_aux_score,
    visual_forward,
)
from streamasd.errors import ShapeError
from streamasd.numerics import temporal_conv
from streamasd.model_io import init_random
from streamasd.oracle import offline_forward, oracle_audio, oracle_visual
from streamasd.config import ContextConfig

from conftest import tiny_config


@pytest.fixture(scope="module")
def biased():
    """Tiny model whose biases and shifts are non-zero, so zero input is informative."""
    cfg = tiny_config()
    p = dict(init_random(cfg, 5))
    rng = np.random.default_rng(99)
    for k in sorted(p):
        if k.endswith(("bias", "shift")):
            p[k] = (0.1 * rng.standard_normal(p[k].shape)).astype(p[k].dtype)
    return cfg, p


class TestShapes:
    def test_default_dims(self, default_config, default_params, rng):
        faces = rng.standard_normal((20, 1, 112, 112)).astype(np.float32)
        mfcc = rng.standard_normal((80, 13))
        e_v = visual_forward(faces, default_params, default_config)
        e_a = audio_forward(mfcc, default_params, default_config)
        assert e_v.values.shape == (20, 128) and e_v.origin == "visual"
        assert e_a.values.shape == (20, 128) and e_a.origin == "audio"

    @pytest.mark.parametrize("shape", [(4, 1, 15, 16), (4, 16, 16), (0, 1, 16, 16), (4, 3, 16, 16)])
    def test_visual_rejects(self, tiny, shape):
        cfg, p = tiny
        with pytest.raises(ShapeError):
            visual_forward(np.zeros(shape, np.float32), p, cfg)

    @pytest.mark.parametrize("shape", [(10, 13), (8, 12), (0, 13), (8,)])
    def test_audio_rejects(self, tiny, shape):
        cfg, p = tiny
        with pytest.raises(ShapeError):
            audio_forward(np.zeros(shape), p, cfg)


class TestGolden:
    # zero input, seeded random biases; values from the float64 oracle
    VISUAL = np.array([
        [-0.111640275299, -0.002128062953, 0.115229230367, 0.023062415745],
        [-0.113646768347, 0.002705122157, 0.111913574662, 0.035216774456],
        [-0.122619951398, 0.030673066178, 0.090619148786, 0.00876479781],
    ])
    AUDIO = np.array([
        [0.048303944152, -0.087931878151, 0.041733637526, -0.208200612038],
        [0.057395937595, -0.056782493538, 0.024120133091, -0.19614221273],
        [0.069594679647, -0.050681043185, 0.004967230423, -0.181512941136],
    ])
    LOGITS = np.array([-0.166946850702, -0.178260627777, -0.199133372298,
                       -0.20243745817, -0.230955038713, -0.24137477505])

    def test_visual(self, biased):
        cfg, p = biased
        out = visual_forward(np.zeros((6, 1, 16, 16), np.float32), p, cfg).values
        np.testing.assert_allclose(out[[0, 2, 5], :4], self.VISUAL, atol=1e-6)

    def test_audio(self, biased):
        cfg, p = biased
        out = audio_forward(np.zeros((24, 13)), p, cfg).values
        np.testing.assert_allclose(out[[0, 2, 5], :4], self.AUDIO, atol=1e-6)

    def test_oracle_frozen(self, biased):
        cfg, p = biased
        out = offline_forward(np.zeros((24, 13)), np.zeros((6, 1, 16, 16), np.float32), ContextConfig(3, 3), p, cfg)
        np.testing.assert_allclose(out, self.LOGITS, atol=1e-10)


class TestAgainstOracle:
    def test_random_input(self, tiny, rng):
        cfg, p = tiny
        faces = rng.standard_normal((37, 1, 16, 16)).astype(np.float32)
        mfcc = rng.standard_normal((148, 13))
        np.testing.assert_allclose(visual_forward(faces, p, cfg).values, oracle_visual(faces, p, cfg), atol=1e-6)
        np.testing.assert_allclose(audio_forward(mfcc, p, cfg).values, oracle_audio(mfcc, p, cfg), atol=1e-6)


class TestCausality:
    def test_prefix_consistency(self, tiny, rng):
        cfg, p = tiny
        faces = rng.standard_normal((40, 1, 16, 16)).astype(np.float32)
        mfcc = rng.standard_normal((160, 13))
        full_v = visual_forward(faces, p, cfg).values
        full_a = audio_forward(mfcc, p, cfg).values
        for k in (1, 7, 23):
            np.testing.assert_allclose(visual_forward(faces[:k], p, cfg).values, full_v[:k], atol=1e-6)
            np.testing.assert_allclose(audio_forward(mfcc[: 4 * k], p, cfg).values, full_a[:k], atol=1e-6)

    def test_future_audio_rows_ignored(self, tiny, rng):
        cfg, p = tiny
        mfcc = rng.standard_normal((80, 13))
        base = audio_forward(mfcc, p, cfg).values
        probe = mfcc.copy()
        probe[4 * 10 + 4 :] += 100.0
        np.testing.assert_allclose(audio_forward(probe, p, cfg).values[:11], base[:11], atol=1e-7)
        assert np.abs(audio_forward(probe, p, cfg).values[11] - base[11]).max() > 1e-4

    def test_stepwise_matches_forward(self, tiny, rng):
        cfg, p = tiny
        faces = rng.standard_normal((12, 1, 16, 16)).astype(np.float32)
        enc = VisualEncoder(p, cfg)
        state = enc.new_state()
        steps = np.concatenate([enc.step(faces[i : i + 1], state) for i in range(12)])
        np.testing.assert_allclose(steps, enc.forward(faces), atol=1e-6)

    def test_symmetric_has_no_stream_state(self, tiny):
        cfg, p = tiny
        with pytest.raises(ShapeError):
            AudioEncoder(p, cfg.with_causal(False)).new_state()


class TestReceptiveField:
    def test_toy_conv(self):
        w = np.zeros((3, 1, 1))
        w[:, 0, 0] = 1.0

        def fn(x):
            return temporal_conv(x[:, None], w, left_pad=2)[:, 0]

        assert measure_receptive_field(fn, 11, ()) == (2, 0)

    @pytest.mark.parametrize("causal,expected", [(True, (12, 0)), (False, (6, 6))])
    def test_visual(self, tiny, causal, expected):
        cfg, p = tiny
        cfg = cfg.with_causal(causal)
        assert cfg.encoder.receptive_field == expected

        def fn(x):
            return visual_forward(x, p, cfg).values

        assert measure_receptive_field(fn, 31, (1, 16, 16)) == expected


class TestAux:
    def test_shape_and_origin(self, tiny, rng):
        cfg, p = tiny
        e_v = visual_forward(rng.standard_normal((5, 1, 16, 16)).astype(np.float32), p, cfg)
        s = visual_aux_score(e_v, p)
        assert s.shape == (5,)
        expected = e_v.values @ p["visual.aux.weight"][:, 0] + p["visual.aux.bias"][0]
        np.testing.assert_allclose(s, expected, rtol=1e-5, atol=1e-7)
        with pytest.raises(ShapeError):
            visual_aux_score(EmbeddingSequence(e_v.values, "audio"), p)
