"""Parameter layout, deterministic initialization and the ASDW weights file.

Random initialization
---------------------
Weights are drawn from a counter-mode SplitMix64 stream (the xor-shift-multiply
generator used to seed the xorshift/xoshiro family).  For a 64-bit ``seed`` the
``i``-th draw (``i = 0, 1, ...``) is, with all arithmetic modulo 2**64::

    z = seed + (i + 1) * 0x9E3779B97F4A7C15
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)
    u = (z >> 40) / 2**24                   # in [0, 1), 24 significant bits

A weight with fan-in ``f`` is ``float32((2u - 1) / sqrt(f))`` computed in
float64 then rounded once.  Tensors consume the stream back to back in the
order of :func:`parameter_specs`, row-major inside each tensor.  Biases and
shifts are 0 and per-channel gains are 1; neither consumes draws.

File layout (all integers little-endian)
----------------------------------------
::

    b"ASDW"  u32 version  u32 config_len  config_len bytes of UTF-8 JSON
    repeated until EOF:
        u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  f32 data[prod(dims)]
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, WeightsFormatError

MAGIC = b"ASDW"
FORMAT_VERSION = 1

Params = dict[str, np.ndarray]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    role: str  # "weight" | "bias" | "gain"
    fan_in: int = 1


def _conv_branch(prefix: str, s_shape, s_fan, t_shape, t_fan, c_out) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.s_conv.weight", s_shape, "weight", s_fan),
        ParamSpec(f"{prefix}.s_conv.bias", (c_out,), "bias"),
        ParamSpec(f"{prefix}.s_norm.weight", (c_out,), "gain"),
        ParamSpec(f"{prefix}.s_norm.bias", (c_out,), "bias"),
        ParamSpec(f"{prefix}.t_conv.weight", t_shape, "weight", t_fan),
        ParamSpec(f"{prefix}.t_conv.bias", (c_out,), "bias"),
        ParamSpec(f"{prefix}.t_norm.weight", (c_out,), "gain"),
        ParamSpec(f"{prefix}.t_norm.bias", (c_out,), "bias"),
    ]


def _dense(prefix: str, d_in: int, d_out: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.weight", (d_in, d_out), "weight", d_in),
        ParamSpec(f"{prefix}.bias", (d_out,), "bias"),
    ]


def parameter_specs(config: ModelConfig) -> list[ParamSpec]:
    """Every tensor the model needs, in canonical order."""
    enc, fus = config.encoder, config.fusion
    ks = config.encoder.spatial_kernel
    specs: list[ParamSpec] = []

    c_in = 1
    for i, c in enumerate(enc.channels):
        for k in enc.branch_kernels:
            specs += _conv_branch(
                f"visual.block{i}.branch{k}",
                (c, c_in, ks, ks), c_in * ks * ks,
                (k, c, c), k * c, c,
            )
        c_in = c
    specs += _dense("visual.proj", c_in, enc.embed_dim)
    specs += _dense("visual.aux", enc.embed_dim, 1)

    c_in = config.frontend.n_mfcc
    ka = enc.audio_kernel
    for i, c in enumerate(enc.channels):
        for k in enc.branch_kernels:
            specs += _conv_branch(
                f"audio.block{i}.branch{k}",
                (ka, c_in, c), ka * c_in,
                (k, c, c), k * c, c,
            )
        c_in = c
    specs += _dense("audio.proj", c_in, enc.embed_dim)

    d = fus.d_model
    if fus.kind == "transformer":
        for i in range(fus.depth):
            p = f"fusion.layer{i}"
            specs += [
                ParamSpec(f"{p}.norm1.weight", (d,), "gain"),
                ParamSpec(f"{p}.norm1.bias", (d,), "bias"),
            ]
            for proj in ("q", "k", "v", "o"):
                specs += _dense(f"{p}.{proj}", d, d)
            specs += [
                ParamSpec(f"{p}.norm2.weight", (d,), "gain"),
                ParamSpec(f"{p}.norm2.bias", (d,), "bias"),
            ]
            specs += _dense(f"{p}.ff1", d, fus.d_ff)
            specs += _dense(f"{p}.ff2", fus.d_ff, d)
            if fus.rel_pos_max:
                width = 2 * fus.rel_pos_max + 1
                specs.append(ParamSpec(f"{p}.rel_bias.weight", (fus.heads, width), "weight", width))
        specs += _dense("fusion.classifier", d, 1)
    else:
        h = fus.gru_hidden
        for g in ("z", "r", "h"):
            specs.append(ParamSpec(f"fusion.gru.w{g}", (d, h), "weight", d))
        for g in ("z", "r", "h"):
            specs.append(ParamSpec(f"fusion.gru.u{g}", (h, h), "weight", h))
        for g in ("z", "r", "h"):
            specs.append(ParamSpec(f"fusion.gru.b{g}", (h,), "bias"))
        specs += _dense("fusion.classifier", h, 1)
    return specs


def splitmix64_uniform(seed: int, start: int, count: int) -> np.ndarray:
    """Draws ``start .. start+count-1`` of the documented stream, as float64 in [0, 1)."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(40)).astype(np.float64) / float(1 << 24)


def _freeze(params: Params) -> Params:
    for arr in params.values():
        arr.flags.writeable = False
    return params


def init_random(config: ModelConfig, seed: int) -> Params:
    """Deterministic parameter set for ``config`` (see module docstring)."""
    config.validate()
    if seed < 0:
        raise ConfigError("seed must be a non-negative 64-bit integer")
    params: Params = {}
    cursor = 0
    for spec in parameter_specs(config):
        if spec.role == "bias":
            arr = np.zeros(spec.shape, dtype=np.float32)
        elif spec.role == "gain":
            arr = np.ones(spec.shape, dtype=np.float32)
        else:
            n = math.prod(spec.shape)
            u = splitmix64_uniform(seed, cursor, n)
            cursor += n
            bound = 1.0 / math.sqrt(spec.fan_in)
            arr = ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(spec.shape)
        params[spec.name] = arr
    return _freeze(params)


# -- container -------------------------------------------------------------


def write_container(path, config_text: str, tensors: Mapping[str, np.ndarray]) -> None:
    """Write raw named float32 tensors plus a config string (no validation)."""
    cfg = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
        fh.write(cfg)
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            if len(raw) > 0xFFFF or arr.ndim > 0xFF:
                raise WeightsFormatError(f"tensor {name!r} cannot be encoded")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightsFormatError(f"truncated file while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def read_container(path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise WeightsFormatError("bad magic: not an ASDW file")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported format version {version}")
    (cfg_len,) = r.unpack("<I", "config length")
    try:
        config_text = r.take(cfg_len, "config").decode("utf-8")
    except UnicodeDecodeError:
        raise WeightsFormatError("config text is not UTF-8") from None
    tensors: dict[str, np.ndarray] = {}
    while not r.done:
        (n_len,) = r.unpack("<H", "tensor name length")
        name = r.take(n_len, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        count = math.prod(dims)
        buf = r.take(4 * count, f"data of {name}")
        if name in tensors:
            raise WeightsFormatError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(dims)
    return config_text, tensors


def save_weights(params: Mapping[str, np.ndarray], config: ModelConfig, path) -> None:
    _check_complete(params, config)
    names = [s.name for s in parameter_specs(config)]
    write_container(path, config.to_json(), {n: params[n] for n in names})


def load_weights(path) -> tuple[ModelConfig, Params]:
    """Read a weights file, validating it against its embedded config."""
    config_text, tensors = read_container(path)
    try:
        config = ModelConfig.from_json(config_text)
    except ConfigError as exc:
        raise WeightsFormatError(f"embedded config invalid: {exc}") from None
    _check_complete(tensors, config)
    return config, _freeze(tensors)


def _check_complete(tensors: Mapping[str, np.ndarray], config: ModelConfig) -> None:
    specs = parameter_specs(config)
    expected = {s.name for s in specs}
    for s in specs:
        if s.name not in tensors:
            raise WeightsFormatError(f"missing tensor {s.name}")
        if tuple(np.shape(tensors[s.name])) != s.shape:
            raise WeightsFormatError(
                f"dim mismatch for {s.name}: {tuple(np.shape(tensors[s.name]))} != {s.shape}"
            )
    extra = sorted(set(tensors) - expected)
    if extra:
        raise WeightsFormatError(f"unexpected tensor {extra[0]}")


def param_bytes(params: Iterable[np.ndarray]) -> int:
    return int(sum(np.asarray(p).nbytes for p in params))
