import csv

import numpy as np
import pytest

from streamasd import formats
from streamasd.cli import main
from streamasd.errors import FrontendError

from conftest import tiny_config


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def media(tmp_path):
    rng = np.random.default_rng(3)
    n_frames = 20
    wav = tmp_path / "a.wav"
    formats.write_wav(wav, 0.3 * rng.standard_normal(640 * n_frames + 240))
    faces = tmp_path / "f.facestream"
    formats.write_facestream(faces, rng.integers(0, 256, (n_frames, 24, 20), dtype=np.uint8))
    cfg = tmp_path / "tiny.json"
    cfg.write_text(tiny_config().to_json())
    return tmp_path, wav, faces, cfg


def _scores(path):
    with open(path, newline="") as fh:
        return [(int(r["frame_index"]), float(r["score"])) for r in csv.DictReader(fh)]


class TestUsage:
    def test_no_args(self, capsys):
        code, _, err = _run(capsys)
        assert code == 1 and "usage" in err

    def test_unknown_flag(self, capsys):
        assert _run(capsys, "cost", "--bogus")[0] == 1

    def test_bad_context(self, capsys):
        assert _run(capsys, "verify", "--past", "-2")[0] == 1


class TestCost:
    def test_single(self, capsys):
        code, out, _ = _run(capsys, "cost", "--past", "32", "--future", "8")
        assert code == 0 and out.strip() == "latency_ms=320 memory=16777216"

    def test_uni_gru(self, capsys):
        _, out, _ = _run(capsys, "cost", "--past", "0", "--future", "0", "--kind", "uni-gru", "--encoder-future", "6")
        assert out.strip() == "latency_ms=240 memory=524288"

    def test_grid(self, capsys, tmp_path):
        _, out, _ = _run(capsys, "cost", "--past", "1:2", "--future", "0:1")
        assert out.splitlines() == ["past,future,latency_ms,memory_bytes", "1,0,0,524288",
                                    "1,1,40,524288", "2,0,0,1048576", "2,1,40,1048576"]
        code, _, _ = _run(capsys, "cost", "--past", "1:2", "--future", "0:1", "--out", str(tmp_path / "g.csv"))
        assert code == 0 and (tmp_path / "g.csv").read_text() == "\n".join(out.splitlines()) + "\n"

    def test_bad_range(self, capsys):
        assert _run(capsys, "cost", "--past", "3:1", "--future", "0")[0] == 2


class TestVerify:
    def test_pass(self, capsys, media):
        tmp, *_, cfg = media
        assert _run(capsys, "init", "--config", str(cfg), "--seed", "1", "--out", str(tmp / "m.asdw"))[0] == 0
        code, out, _ = _run(capsys, "verify", "--model", str(tmp / "m.asdw"), "--frames", "30",
                            "--past", "3", "--future", "2")
        assert code == 0 and out.startswith("PASS")

    def test_unbounded_is_data_error(self, capsys, media):
        tmp, *_, cfg = media
        _run(capsys, "init", "--config", str(cfg), "--out", str(tmp / "m.asdw"))
        code, _, err = _run(capsys, "verify", "--model", str(tmp / "m.asdw"), "--past", "inf", "--frames", "5")
        assert code == 2 and "bounded" in err

    def test_failure_exit_code(self, capsys, media):
        tmp, *_, cfg = media
        _run(capsys, "init", "--config", str(cfg), "--out", str(tmp / "m.asdw"))
        code, out, _ = _run(capsys, "verify", "--model", str(tmp / "m.asdw"), "--frames", "10", "--tol", "-1")
        assert code == 3 and out.startswith("FAIL")


class TestInfer:
    def test_stream_matches_offline(self, capsys, media):
        tmp, wav, faces, cfg = media
        model = tmp / "m.asdw"
        _run(capsys, "init", "--config", str(cfg), "--seed", "2", "--out", str(model))
        common = ["--model", str(model), "--audio", str(wav), "--faces", str(faces), "--past", "3", "--future", "2"]
        code, out, _ = _run(capsys, "infer", *common, "--out", str(tmp / "s.csv"), "--timings", str(tmp / "t.csv"))
        assert code == 0 and "fps=" in out and "mean_ms" in out
        code, _, _ = _run(capsys, "infer-offline", *common, "--out", str(tmp / "o.csv"))
        assert code == 0
        s, o = _scores(tmp / "s.csv"), _scores(tmp / "o.csv")
        assert [i for i, _ in s] == list(range(20)) == [i for i, _ in o]
        np.testing.assert_allclose([v for _, v in s], [v for _, v in o], atol=1e-5)
        with open(tmp / "t.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 20 and float(rows[0]["encoder_us"]) > 0

    def test_missing_file(self, capsys, media):
        tmp, wav, faces, cfg = media
        code, _, err = _run(capsys, "infer", "--model", str(tmp / "nope"), "--audio", str(wav),
                            "--faces", str(faces), "--out", str(tmp / "s.csv"))
        assert code == 2 and "error" in err

    def test_misaligned(self, capsys, media):
        tmp, wav, _, cfg = media
        faces = tmp / "long.facestream"
        formats.write_facestream(faces, np.zeros((40, 8, 8), np.uint8))
        _run(capsys, "init", "--config", str(cfg), "--out", str(tmp / "m.asdw"))
        code, _, err = _run(capsys, "infer", "--model", str(tmp / "m.asdw"), "--audio", str(wav),
                            "--faces", str(faces), "--out", str(tmp / "s.csv"))
        assert code == 2 and ("drift" in err.lower() or "align" in err.lower())


class TestEval:
    def test_plain(self, capsys, tmp_path):
        (tmp_path / "s.csv").write_text("frame_index,score\n0,0.9\n1,0.8\n2,0.7\n3,0.6\n")
        (tmp_path / "l.csv").write_text("frame_index,label\n0,1\n1,0\n2,1\n3,0\n")
        code, out, _ = _run(capsys, "eval", "--scores", str(tmp_path / "s.csv"), "--labels", str(tmp_path / "l.csv"))
        assert code == 0 and out.strip() == "mAP=0.833333 frames=4"

    def test_grouped(self, capsys, tmp_path):
        (tmp_path / "s.csv").write_text("track,frame_index,score\na,0,0.9\na,1,0.1\nb,0,0.9\nb,1,0.1\n")
        (tmp_path / "l.csv").write_text("track,frame_index,label\na,0,1\na,1,0\nb,0,0\nb,1,1\n")
        code, out, _ = _run(capsys, "eval", "--scores", str(tmp_path / "s.csv"),
                            "--labels", str(tmp_path / "l.csv"), "--group-col", "track")
        assert code == 0 and out.strip() == "mAP=0.750000 groups=2 skipped=0"

    def test_no_positives(self, capsys, tmp_path):
        (tmp_path / "s.csv").write_text("frame_index,score\n0,0.9\n")
        (tmp_path / "l.csv").write_text("frame_index,label\n0,0\n")
        assert _run(capsys, "eval", "--scores", str(tmp_path / "s.csv"), "--labels", str(tmp_path / "l.csv"))[0] == 2


class TestMfcc:
    def test_dump(self, capsys, media):
        tmp, wav, *_ = media
        code, out, _ = _run(capsys, "mfcc", "--audio", str(wav), "--out", str(tmp / "m.bin"))
        assert code == 0 and "x 13" in out
        m = formats.read_mfcc(tmp / "m.bin")
        assert m.shape == (80, 13) and m.dtype == np.float32


class TestFormats:
    def test_facestream_round_trip(self, tmp_path):
        frames = np.arange(2 * 3 * 5, dtype=np.uint8).reshape(2, 3, 5)
        formats.write_facestream(tmp_path / "x", frames)
        np.testing.assert_array_equal(formats.read_facestream(tmp_path / "x"), frames)
        (tmp_path / "x").write_bytes((tmp_path / "x").read_bytes()[:-1])
        with pytest.raises(FrontendError):
            formats.read_facestream(tmp_path / "x")

    def test_wav_rate_checked(self, tmp_path):
        formats.write_wav(tmp_path / "w.wav", np.zeros(10), sample_rate=8000)
        with pytest.raises(FrontendError):
            formats.read_wav(tmp_path / "w.wav")
