"""On-disk formats used by the command line tools.

* WAV: PCM16, mono, 16 kHz only.
* ``.facestream``: ``b"FSTR"``, u32 version (1), u32 n_frames, u16 H, u16 W,
  then ``n_frames*H*W`` uint8 grayscale bytes, row-major.  Little-endian.
* ``mfcc.bin``: a weights container (see :mod:`streamasd.model_io`) holding
  one ``mfcc`` tensor of shape ``(T_a, 13)``.
* scores CSV ``frame_index,score``; labels CSV ``frame_index,label``; either
  may carry an extra group column for grouped mAP.
* timings CSV ``frame_index,frontend_us,encoder_us,attention_us,total_us``.
"""

from __future__ import annotations

import csv
import json
import struct
import wave
from pathlib import Path

import numpy as np

from .errors import FrontendError
from .model_io import read_container, write_container

FACE_MAGIC = b"FSTR"
TIMING_FIELDS = ("frontend_us", "encoder_us", "attention_us", "total_us")


def read_wav(path, sample_rate: int = 16000) -> np.ndarray:
    """PCM16 mono samples scaled to [-1, 1) as float64."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise FrontendError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise FrontendError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            if wf.getframerate() != sample_rate:
                raise FrontendError(f"{path}: expected {sample_rate} Hz, got {wf.getframerate()} Hz")
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FrontendError(f"{path}: not a readable WAV file ({exc})") from None
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def write_facestream(path, frames) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.dtype != np.uint8:
        raise FrontendError(f"facestream frames must be uint8 (T, H, W), got {frames.dtype} {frames.shape}")
    t, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(FACE_MAGIC + struct.pack("<IIHH", 1, t, h, w))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_facestream(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FACE_MAGIC:
        raise FrontendError(f"{path}: bad magic, not a facestream file")
    if len(data) < 16:
        raise FrontendError(f"{path}: truncated header")
    version, t, h, w = struct.unpack_from("<IIHH", data, 4)
    if version != 1:
        raise FrontendError(f"{path}: unsupported facestream version {version}")
    need = 16 + t * h * w
    if len(data) != need:
        raise FrontendError(f"{path}: expected {need} bytes for {t} frames of {h}x{w}, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(t, h, w)


def write_mfcc(path, frames, hop: float = 0.010, window: float = 0.025) -> None:
    """MFCCs as a one-tensor weights container (float32 on disk)."""
    meta = json.dumps({"kind": "mfcc", "hop": hop, "window": window})
    write_container(path, meta, {"mfcc": np.asarray(frames, dtype=np.float32)})


def read_mfcc(path) -> np.ndarray:
    meta, tensors = read_container(path)
    if "mfcc" not in tensors:
        raise FrontendError(f"{path}: no mfcc tensor")
    return tensors["mfcc"]


def write_scores(path, rows) -> None:
    """``rows`` are ``(frame_index, score)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "score"])
        for idx, score in rows:
            w.writerow([idx, repr(float(score))])


def write_timings(path, emissions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", *TIMING_FIELDS])
        for e in emissions:
            w.writerow([e.frame_index, *(f"{e.wall_time.get(k, 0.0):.1f}" for k in TIMING_FIELDS)])


def read_column_csv(path, value_col: str, group_col: str | None = None) -> dict:
    """Map ``(group, frame_index)`` (group ``None`` if absent) to the value column."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in ("frame_index", value_col) + ((group_col,) if group_col else ()):
            if col not in fields:
                raise FrontendError(f"{path}: missing column {col!r} (have {fields})")
        for line, row in enumerate(reader, start=2):
            try:
                key = (row[group_col] if group_col else None, int(row["frame_index"]))
                value = float(row[value_col])
            except (TypeError, ValueError):
                raise FrontendError(f"{path}:{line}: malformed row {row}") from None
            if key in out:
                raise FrontendError(f"{path}:{line}: duplicate frame {key[1]}")
            out[key] = value
    return out


def join_scores_labels(scores_path, labels_path, group_col: str | None = None) -> list[tuple]:
    """``(group, score, label)`` rows for frames present in both files."""
    scores = read_column_csv(scores_path, "score", group_col)
    labels = read_column_csv(labels_path, "label", group_col)
    keys = sorted(set(scores) & set(labels), key=lambda k: (str(k[0]), k[1]))
    if not keys:
        raise FrontendError("scores and labels share no frame_index")
    return [(k[0], scores[k], int(labels[k])) for k in keys]
