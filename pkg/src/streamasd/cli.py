"""``asd`` command line entry point.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats
from .config import ContextConfig, ModelConfig
from .cost import CostConfig, grid_csv, latency_ms, memory_bytes, parse_range, sweep_grid
from .errors import AsdError
from .frontend import MfccStream, aligned_length, compute_mfcc, mfcc_count, mfcc_ratio, preprocess_faces
from .metrics import average_precision, map_over_groups
from .model_io import init_random, load_weights, save_weights
from .numerics import sigmoid
from .oracle import compare_streams, offline_forward
from .streaming import open_session, run_stream

log = logging.getLogger("asd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _context_count(text: str):
    if text.lower() in ("inf", "unbounded"):
        return None
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a frame count or 'inf', got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("frame counts must be >= 0")
    return v


def _ctx(args) -> ContextConfig:
    return ContextConfig(args.past, args.future)


# -- commands ------------------------------------------------------------------


def cmd_init(args) -> int:
    config = ModelConfig()
    if args.config:
        config = ModelConfig.from_json(Path(args.config).read_text())
    params = init_random(config, args.seed)
    save_weights(params, config, args.out)
    print(f"wrote {len(params)} tensors to {args.out}")
    return EXIT_OK


def _load_inputs(args, config: ModelConfig):
    samples = formats.read_wav(args.audio, config.frontend.sample_rate)
    raw_faces = formats.read_facestream(args.faces)
    return samples, raw_faces


def cmd_infer(args) -> int:
    config, params = load_weights(args.model)
    fe = config.frontend
    samples, raw_faces = _load_inputs(args, config)
    r = mfcc_ratio(fe.hop_s, fe.fps)
    n = aligned_length(mfcc_count(samples.size, fe), raw_faces.shape[0], r)
    session = open_session(params, _ctx(args), config)
    spf = int(round(fe.sample_rate / fe.fps))
    mfcc_stream, pending = MfccStream(fe), np.zeros((0, fe.n_mfcc))
    emissions = []
    t_start = time.perf_counter()
    pos = 0
    for i in range(n):
        t0 = time.perf_counter_ns()
        # feed audio until this frame's R rows are available
        while pending.shape[0] < r:
            if pos >= samples.size:
                raise AsdError(f"audio ran out at video frame {i}")
            chunk = samples[pos : pos + spf]
            pos += spf
            pending = np.concatenate([pending, mfcc_stream.feed(chunk)])
        rows, pending = pending[:r], pending[r:]
        face = preprocess_faces(raw_faces[i : i + 1], config=fe).frames[0]
        frontend_us = (time.perf_counter_ns() - t0) / 1e3
        emissions.extend(session.push(face, rows, frontend_us))
    emissions.extend(session.flush())
    elapsed = time.perf_counter() - t_start
    formats.write_scores(args.out, [(e.frame_index, e.probability) for e in emissions])
    if args.timings:
        formats.write_timings(args.timings, emissions)
    _report_timing(emissions, elapsed)
    return EXIT_OK


def _report_timing(emissions, elapsed: float) -> None:
    fps = len(emissions) / elapsed if elapsed > 0 else float("inf")
    pushed = [e.wall_time for e in emissions if e.wall_time.get("encoder_us")]
    print(f"frames={len(emissions)} elapsed_s={elapsed:.2f} fps={fps:.1f}")
    if pushed:
        means = {k: np.mean([w[k] for w in pushed]) / 1e3 for k in formats.TIMING_FIELDS}
        print("mean_ms " + " ".join(f"{k[:-3]}={v:.2f}" for k, v in means.items()))


def cmd_infer_offline(args) -> int:
    config, params = load_weights(args.model)
    samples, raw_faces = _load_inputs(args, config)
    mfcc = compute_mfcc(samples, config.frontend.sample_rate, config.frontend)
    faces = preprocess_faces(raw_faces, config=config.frontend)
    logits = offline_forward(mfcc, faces, _ctx(args), params, config)
    rows = [(i, sigmoid(float(v))) for i, v in enumerate(logits)]
    formats.write_scores(args.out, rows)
    if args.timings:
        log.warning("offline path has no per-frame timings; --timings ignored")
    print(f"frames={len(rows)}")
    return EXIT_OK


def synthetic_inputs(seed: int, frames: int, config: ModelConfig):
    """Random standardized faces and MFCC rows for ``frames`` video frames."""
    rng = np.random.default_rng(seed)
    size, r = config.frontend.image_size, config.encoder.audio_downsample
    faces = rng.standard_normal((frames, 1, size, size)).astype(np.float32)
    mfcc = rng.standard_normal((r * frames, config.frontend.n_mfcc))
    return faces, mfcc


def cmd_verify(args) -> int:
    if args.model:
        config, params = load_weights(args.model)
    else:
        config = ModelConfig()
        params = init_random(config, args.seed)
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    ctx = _ctx(args)
    faces, mfcc = synthetic_inputs(args.seed, args.frames, config)
    emissions = run_stream(open_session(params, ctx, config), faces, mfcc)
    streamed = np.array([e.logit for e in emissions])
    reference = offline_forward(mfcc, faces, ctx, params, config)
    report = compare_streams(streamed, reference, args.tol)
    print(report)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_cost(args) -> int:
    base = CostConfig(fps=args.fps, bytes_per_frame=args.bytes_per_frame,
                      encoder_future=args.encoder_future, kind=args.kind)
    pasts, futures = parse_range(args.past), parse_range(args.future)
    if args.kind != "transformer" or (len(pasts) == 1 and len(futures) == 1 and not args.out):
        cfg = replace(base, ctx=ContextConfig(pasts[0], futures[0]))
        print(f"latency_ms={latency_ms(cfg)} memory={memory_bytes(cfg)}")
        return EXIT_OK
    text = grid_csv(sweep_grid(pasts, futures, base))
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(pasts) * len(futures)} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = formats.join_scores_labels(args.scores, args.labels, args.group_col)
    if args.group_col:
        res = map_over_groups(rows)
        print(f"mAP={res.mean_ap:.6f} groups={len(res.per_group)} skipped={len(res.skipped)}")
    else:
        ap = average_precision([r[1] for r in rows], [r[2] for r in rows])
        print(f"mAP={ap:.6f} frames={len(rows)}")
    return EXIT_OK


def cmd_mfcc(args) -> int:
    fe = ModelConfig().frontend
    mfcc = compute_mfcc(formats.read_wav(args.audio, fe.sample_rate), fe.sample_rate, fe)
    formats.write_mfcc(args.out, mfcc.frames, mfcc.hop, mfcc.window)
    print(f"wrote {len(mfcc)} x {mfcc.frames.shape[1]} coefficients to {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _infer_flags(p):
    p.add_argument("--model", required=True)
    p.add_argument("--audio", required=True, help="PCM16 mono 16 kHz WAV")
    p.add_argument("--faces", required=True, help=".facestream file")
    p.add_argument("--past", type=_context_count, default=32)
    p.add_argument("--future", type=_context_count, default=8)
    p.add_argument("--out", required=True, help="scores CSV")
    p.add_argument("--timings", help="per-frame timings CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asd", description="Streaming audio-visual active speaker detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("init", help="write a randomly initialized model")
    p.add_argument("--config", help="model config JSON (defaults if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("infer", help="streaming inference")
    _infer_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("infer-offline", help="whole-sequence reference inference")
    _infer_flags(p)
    p.set_defaults(func=cmd_infer_offline)

    p = sub.add_parser("verify", help="compare streaming against the offline reference on random input")
    p.add_argument("--model")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--past", type=_context_count, default=32)
    p.add_argument("--future", type=_context_count, default=8)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("cost", help="latency / memory table")
    p.add_argument("--past", required=True, help="A or A:B")
    p.add_argument("--future", required=True, help="C or C:D")
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--bytes-per-frame", type=int, default=524_288)
    p.add_argument("--encoder-future", type=int, default=0)
    p.add_argument("--kind", choices=("transformer", "uni-gru", "bi-gru"), default="transformer")
    p.add_argument("--out", help="grid CSV")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("eval", help="mAP of a scores CSV against labels")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--group-col")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mfcc", help="dump MFCCs of a WAV file")
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mfcc)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (AsdError, OSError) as exc:
        print(f"asd: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
