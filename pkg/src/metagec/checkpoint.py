"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MGEC"  u32 version
    7 x i64  model config (vocab, d_model, heads, enc layers, dec layers, d_ff, max_len)
    u32      tensor count, then per tensor:
             u32 name length, utf-8 name, u32 rank, rank x u64 extents, float64 data
    u8       optimizer present; if 1: u64 step, f64 beta1, beta2, eps,
             then first and second moments for each tensor in the order above
    u8       rng present; if 1: 6 x u64 PCG64 state words
             (state hi, state lo, inc hi, inc lo, has_uint32, uinteger)
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState
from .model import ModelConfig, ModelParams

MAGIC = b"MGEC"
VERSION = 1
_MASK64 = (1 << 64) - 1
_CONFIG_FIELDS = ("vocab_size", "d_model", "n_heads", "enc_layers", "dec_layers", "d_ff", "max_len")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    adam: AdamState | None = None
    rng_state: dict | None = None


def _array_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    out.write(struct.pack("<7q", *(getattr(ckpt.config, f) for f in _CONFIG_FIELDS)))
    names = list(ckpt.params)
    out.write(struct.pack("<I", len(names)))
    for name in names:
        arr = ckpt.params[name]
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(_array_bytes(arr))
    if ckpt.adam is None:
        out.write(b"\x00")
    else:
        a = ckpt.adam
        out.write(b"\x01" + struct.pack("<Q3d", a.step, a.beta1, a.beta2, a.eps))
        for name in names:
            out.write(_array_bytes(a.m[name]))
            out.write(_array_bytes(a.v[name]))
    if ckpt.rng_state is None:
        out.write(b"\x00")
    else:
        st = ckpt.rng_state
        if st.get("bit_generator") != "PCG64":
            raise ValueError("only PCG64 generator state can be stored")
        s, inc = st["state"]["state"], st["state"]["inc"]
        words = (s >> 64, s & _MASK64, inc >> 64, inc & _MASK64, st["has_uint32"], st["uinteger"])
        out.write(b"\x01" + struct.pack("<6Q", *words))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.at = 0

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.data):
            raise ValueError("truncated checkpoint")
        chunk = self.data[self.at:self.at + n]
        self.at += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, r.unpack("<7q"))))
    (count,) = r.unpack("<I")
    params: ModelParams = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        params[name] = r.array(shape)
    adam = None
    if r.take(1) == b"\x01":
        step, b1, b2, eps = r.unpack("<Q3d")
        adam = AdamState(b1, b2, eps, step)
        for name, p in params.items():
            adam.m[name] = r.array(p.shape)
            adam.v[name] = r.array(p.shape)
    rng_state = None
    if r.take(1) == b"\x01":
        s_hi, s_lo, i_hi, i_lo, has32, uint = r.unpack("<6Q")
        rng_state = {
            "bit_generator": "PCG64",
            "state": {"state": (s_hi << 64) | s_lo, "inc": (i_hi << 64) | i_lo},
            "has_uint32": has32,
            "uinteger": uint,
        }
    if r.at != len(data):
        raise ValueError(f"{len(data) - r.at} trailing bytes after checkpoint")
    return Checkpoint(config, params, adam, rng_state)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
