"""Audio (MFCC) and face-crop preprocessing, plus stream alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import FrontendConfig
from .errors import AlignmentError, FrontendError

DEFAULT_FRONTEND = FrontendConfig()


@dataclass
class MfccSequence:
    """Cepstral features, one row per hop.

    Kept in float64 so that the frontend can be checked against a direct-DFT
    reference at 1e-6; the encoders cast to float32 on entry.
    """

    frames: np.ndarray  # (T_a, n_mfcc)
    hop: float = 0.010
    window: float = 0.025

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class FaceFrameSequence:
    frames: np.ndarray  # (T_v, 1, H, W) float32, standardized
    fps: float = 25.0

    def __len__(self) -> int:
        return self.frames.shape[0]


# -- MFCC --------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FrontendConfig = DEFAULT_FRONTEND) -> np.ndarray:
    """Triangular filters with unit peak, shape ``(n_mels, n_fft//2 + 1)``.

    Triangles are evaluated at the exact bin centre frequencies, not snapped
    to integer bins.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


@lru_cache(maxsize=8)
def dct_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Orthonormal DCT-II rows ``0..n_out-1``; apply as ``x @ M.T``."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    m = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * math.sqrt(2.0 / n_in)
    m[0] /= math.sqrt(2.0)
    m.flags.writeable = False
    return m


@lru_cache(maxsize=8)
def hamming(n: int) -> np.ndarray:
    w = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / (n - 1))
    w.flags.writeable = False
    return w


def dft_power(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """One-sided power spectrum ``|X[k]|**2`` for ``k = 0 .. n_fft/2`` per row."""
    spec = np.fft.rfft(np.asarray(frames, dtype=np.float64), n=n_fft, axis=-1)
    return spec.real**2 + spec.imag**2


def _mfcc_from_frames(frames: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    a = cfg.preemphasis
    # Per-frame pre-emphasis keeps every frame a function of its own samples only.
    emph = np.empty_like(frames)
    emph[:, 1:] = frames[:, 1:] - a * frames[:, :-1]
    emph[:, 0] = frames[:, 0] * (1.0 - a)
    power = dft_power(emph * hamming(cfg.window_samples), cfg.n_fft)
    mel = power @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return logmel @ dct_matrix(cfg.n_mels, cfg.n_mfcc).T


def compute_mfcc(samples, sample_rate: int = 16000, config: FrontendConfig = DEFAULT_FRONTEND) -> MfccSequence:
    """MFCCs of a mono waveform.

    Pipeline: framing (25 ms Hamming, 10 ms hop), per-frame pre-emphasis
    (0.97), power spectrum on a zero-padded 512-point DFT, 40 unit-peak mel
    triangles over 0-8 kHz, natural log floored at 1e-10, orthonormal DCT-II
    keeping 13 coefficients.

    ``T_a = (n_samples - window) // hop + 1``, see :func:`mfcc_count`.
    """
    if sample_rate != config.sample_rate:
        raise FrontendError(f"expected {config.sample_rate} Hz audio, got {sample_rate} Hz")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise FrontendError(f"expected mono samples, got shape {x.shape}")
    win, hop = config.window_samples, config.hop_samples
    if x.size < win:
        raise FrontendError(f"need at least {win} samples, got {x.size}")
    if not np.isfinite(x).all():
        raise FrontendError("audio contains non-finite samples")
    frames = sliding_window_view(x, win)[::hop]
    return MfccSequence(_mfcc_from_frames(frames, config), hop=config.hop_s, window=config.window_s)


def mfcc_count(n_samples: int, config: FrontendConfig = DEFAULT_FRONTEND) -> int:
    if n_samples < config.window_samples:
        return 0
    return (n_samples - config.window_samples) // config.hop_samples + 1


class MfccStream:
    """Incremental MFCC: feed arbitrary sample chunks, receive completed frames.

    Yields the same rows as :func:`compute_mfcc` on the concatenated input.
    """

    def __init__(self, config: FrontendConfig = DEFAULT_FRONTEND):
        self.config = config
        self._buf = np.zeros(0, dtype=np.float64)
        self.frames_emitted = 0

    def feed(self, samples) -> np.ndarray:
        cfg = self.config
        win, hop = cfg.window_samples, cfg.hop_samples
        self._buf = np.concatenate([self._buf, np.asarray(samples, dtype=np.float64).ravel()])
        if self._buf.size < win:
            return np.zeros((0, cfg.n_mfcc))
        n = (self._buf.size - win) // hop + 1
        out = _mfcc_from_frames(sliding_window_view(self._buf, win)[: n * hop : hop], cfg)
        self._buf = self._buf[n * hop :].copy()
        self.frames_emitted += n
        return out


# -- faces -------------------------------------------------------------------


def to_grayscale(raw: np.ndarray) -> np.ndarray:
    """BT.601 luma for ``(..., 3)`` RGB input; grayscale passes through as float64."""
    raw = np.asarray(raw)
    if raw.ndim == 4 and raw.shape[-1] == 3:
        return raw.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    if raw.ndim != 3:
        raise FrontendError(f"expected (T, H, W) or (T, H, W, 3) images, got {raw.shape}")
    return raw.astype(np.float64)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge clamped
    c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    c = np.clip(c, 0.0, n_in - 1)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, c - i0


def bilinear_resize(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize ``(T, H0, W0)`` to ``(T, height, width)`` with half-pixel bilinear sampling."""
    img = np.asarray(images, dtype=np.float64)
    y0, y1, fy = _axis_weights(img.shape[1], height)
    x0, x1, fx = _axis_weights(img.shape[2], width)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[None, :, None] + bot * fy[None, :, None]


def preprocess_faces(raw, target: tuple[int, int] | None = None, config: FrontendConfig = DEFAULT_FRONTEND) -> FaceFrameSequence:
    """uint8 face crops -> standardized grayscale ``(T, 1, H, W)`` float32.

    Each frame is resized to ``target`` (default ``image_size`` square),
    scaled to [0, 1] and standardized with fixed mean/std.
    """
    gray = to_grayscale(raw)
    if gray.shape[0] == 0:
        raise FrontendError("no face frames")
    if gray.shape[1] == 0 or gray.shape[2] == 0:
        raise FrontendError("zero-sized face image")
    h, w = target if target is not None else (config.image_size, config.image_size)
    if gray.shape[1:] != (h, w):
        gray = bilinear_resize(gray, h, w)
    out = (gray / 255.0 - config.pixel_mean) / config.pixel_std
    return FaceFrameSequence(out.astype(np.float32)[:, None], fps=config.fps)


# -- alignment ---------------------------------------------------------------


def aligned_length(t_a: int, t_v: int, r: int) -> int:
    """Video frames kept when aligning ``t_a`` MFCC rows with ``t_v`` frames."""
    if t_a == 0 or t_v == 0:
        raise AlignmentError("cannot align empty streams")
    if abs(t_a - r * t_v) > r:
        raise AlignmentError(f"streams drift by {abs(t_a - r * t_v)} MFCC frames (> {r}): T_a={t_a}, T_v={t_v}")
    n = min(t_v, t_a // r)
    if n == 0:
        raise AlignmentError("audio shorter than one video frame")
    return n


def mfcc_ratio(hop: float, fps: float) -> int:
    ratio = 1.0 / (hop * fps)
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-6:
        raise AlignmentError(f"hop {hop}s and {fps} fps give a non-integer ratio {ratio}")
    return r


def align_streams(a: MfccSequence, v: FaceFrameSequence) -> tuple[MfccSequence, FaceFrameSequence, int]:
    """Trim both streams so that ``len(a) == R * len(v)``.

    ``R`` is the number of MFCC hops per video frame (4 at 10 ms / 25 fps).
    More than one video frame of drift is treated as a data error.
    """
    r = mfcc_ratio(a.hop, v.fps)
    n = aligned_length(len(a), len(v), r)
    a2 = MfccSequence(a.frames[: r * n], hop=a.hop, window=a.window)
    return a2, FaceFrameSequence(v.frames[:n], fps=v.fps), r
