"""Binary checkpoints for model parameters and optimizer state.

Layout (little-endian)::

    "FSM1" | u8 variant | per layer: u64 n, n*f32 weight, u64 n, n*f32 bias
    [ "ADM1" | u64 step | f64 lr, beta1, beta2, eps
      | per parameter: u64 n, n*f32 m, u64 n, n*f32 v ]

The optimizer section is optional.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .models import ModelGraph, build_model, VARIANTS
from .optim import AdamState

MODEL_MAGIC = b"FSM1"
ADAM_MAGIC = b"ADM1"

_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the architecture."""


def _write_blob(buf, arr: np.ndarray) -> None:
    flat = np.ascontiguousarray(arr, dtype=_F32).ravel()
    buf.write(struct.pack("<Q", flat.size))
    buf.write(flat.tobytes())


def _read_blob(raw: bytes, off: int, expect_shape) -> tuple[np.ndarray, int]:
    if off + 8 > len(raw):
        raise CheckpointError("truncated checkpoint")
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if n != int(np.prod(expect_shape)) or off + 4 * n > len(raw):
        raise CheckpointError(f"blob of {n} values does not fit shape {tuple(expect_shape)}")
    arr = np.frombuffer(raw, _F32, n, off).astype(np.float32).reshape(expect_shape)
    return arr, off + 4 * n


def checkpoint_bytes(model: ModelGraph, adam: AdamState | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<B", VARIANTS.index(model.variant)))
    for layer in model.layers:
        _write_blob(buf, layer.weight.data)
        _write_blob(buf, layer.bias.data)
    if adam is not None:
        buf.write(ADAM_MAGIC)
        buf.write(struct.pack("<Q", adam.t))
        buf.write(struct.pack("<4d", adam.lr, adam.beta1, adam.beta2, adam.eps))
        for m, v in zip(adam.m, adam.v):
            _write_blob(buf, m)
            _write_blob(buf, v)
    return buf.getvalue()


def save_checkpoint(path, model: ModelGraph, adam: AdamState | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, adam))


def parse_checkpoint(raw: bytes) -> tuple[ModelGraph, AdamState | None]:
    if raw[:4] != MODEL_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MODEL_MAGIC!r}")
    code = raw[4]
    if code >= len(VARIANTS):
        raise CheckpointError(f"unknown variant code {code}")
    model = build_model(VARIANTS[code], seed=0)
    off = 5
    for layer in model.layers:
        layer.weight.data, off = _read_blob(raw, off, layer.weight.shape)
        layer.bias.data, off = _read_blob(raw, off, layer.bias.shape)
    if off == len(raw):
        return model, None
    if raw[off : off + 4] != ADAM_MAGIC:
        raise CheckpointError(f"unexpected section tag {raw[off:off + 4]!r}")
    off += 4
    (t,) = struct.unpack_from("<Q", raw, off)
    lr, b1, b2, eps = struct.unpack_from("<4d", raw, off + 8)
    off += 8 + 32
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=t)
    for p in model.parameters():
        m, off = _read_blob(raw, off, p.shape)
        v, off = _read_blob(raw, off, p.shape)
        state.m.append(m)
        state.v.append(v)
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes")
    return model, state


def load_checkpoint(path) -> tuple[ModelGraph, AdamState | None]:
    return parse_checkpoint(Path(path).read_bytes())
