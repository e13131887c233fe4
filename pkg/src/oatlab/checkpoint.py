"""Binary checkpoint format.

Layout::

    b"OATCKPT1"
    u64 LE  header length
    header  UTF-8 JSON (sorted keys): config, data shape, lambda grid, seed, step
    records name_len u32 | name | dtype u8 | ndim u8 | dims u32 * ndim | payload (LE)

Records are written in the order they are given and read back in file order,
so ``save(load(path))`` reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import ConditionalCNN

MAGIC = b"OATCKPT1"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
ENCODER_KEY = "encoder.matrix"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.header.get("seed", 0))

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))


def _code(arr: np.ndarray) -> int:
    for code, dt in DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def dumps(ckpt: Checkpoint) -> bytes:
    head = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(head)), head]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(raw)
    return b"".join(parts)


def loads(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:8]!r}, expected {MAGIC!r}")
    pos = 8

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated while reading {what} at offset {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (hlen,) = struct.unpack("<Q", take(8, "header length"))
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header ({exc})") from None
    tensors: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "tensor name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"{name} dtype"))
        if code not in DTYPES:
            raise CheckpointError(f"{source}: tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        dt = DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64))
        raw = take(count * dt.itemsize, f"{name} payload")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return Checkpoint(header, tensors)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    p = Path(path)
    return loads(p.read_bytes(), str(p))


# ---------------------------------------------------------------------------
# model <-> tensors

def model_tensors(model: ConditionalCNN) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.params.items()}
    out.update(model.buffers())
    if model.encoder is not None:
        out[ENCODER_KEY] = model.encoder.matrix
    return out


def apply_tensors(model: ConditionalCNN, tensors: dict[str, np.ndarray], source: str = "checkpoint") -> None:
    """Copy stored arrays into ``model``; every name and shape must match exactly."""
    expected = {k: v.shape for k, v in model_tensors(model).items()}
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{source}: tensor names differ from the model (missing {missing}, unexpected {extra})")
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(expected[name]):
            raise CheckpointError(f"{source}: {name} has shape {tuple(arr.shape)}, model expects {expected[name]}")
    buffers = model.buffers()
    for name, arr in tensors.items():
        if name in model.params:
            model.params[name].data = arr.copy()
        elif name in buffers:
            model.set_buffer(name, arr)
        elif name == ENCODER_KEY:
            model.encoder.matrix = arr.copy()
