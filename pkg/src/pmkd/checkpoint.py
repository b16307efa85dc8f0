"""Binary checkpoint format for model state.

Layout (little-endian):

    magic "PMKD" | version u32 | tensor count u32
    per tensor: name length u16 | name UTF-8 | dtype u8 (0 = f32)
                | rank u8 | dims u32 x rank | row-major payload
    trailing u64: FNV-1a 64 of all prior bytes

Round trips are bit-exact, including batchnorm running statistics.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import kernels

_MAGIC = b"PMKD"
_VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(ValueError):
    """Base for unreadable or mismatched checkpoints."""


class ChecksumError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass


class MismatchError(CheckpointError):
    """Checkpoint does not fit the expected model build."""


def _state_items(model_or_items):
    if hasattr(model_or_items, "state_items"):
        return model_or_items.state_items()
    return list(model_or_items)


def save_checkpoint(model_or_items, path) -> None:
    """Write named float32 arrays (a Model's state or explicit items)."""
    items = _state_items(model_or_items)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names in checkpoint payload")
    buf = bytearray()
    buf += struct.pack("<4sII", _MAGIC, _VERSION, len(items))
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float32)
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<BB", _DTYPE_F32, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f4").tobytes()
    buf += struct.pack("<Q", kernels.fnv1a64(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def read_checkpoint_items(path) -> list[tuple[str, np.ndarray]]:
    """Parse and checksum-verify a checkpoint into named arrays."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 + 8:
        raise FormatError(f"{path}: too short to be a checkpoint")
    body, stored = raw[:-8], struct.unpack("<Q", raw[-8:])[0]
    if kernels.fnv1a64(body) != stored:
        raise ChecksumError(f"{path}: checksum mismatch (corrupt or truncated)")
    magic, version, count = struct.unpack_from("<4sII", body)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    items = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        dtype, rank = struct.unpack_from("<BB", body, off)
        off += 2
        if dtype != _DTYPE_F32:
            raise FormatError(f"{path}: unknown dtype code {dtype} for {name}")
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, "<f4", n, off).reshape(dims).copy()
        off += 4 * n
        items.append((name, arr))
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} trailing bytes")
    return items


def load_checkpoint(path, model):
    """Load a checkpoint into a built model, verifying names and shapes.

    The checkpoint must list exactly the model's state, in order; the
    first offending entry is named in the error.
    """
    items = read_checkpoint_items(path)
    expected = model.state_items()
    if len(items) != len(expected):
        raise MismatchError(f"{path}: holds {len(items)} tensors, model "
                            f"expects {len(expected)}")
    for (got_name, got), (name, dst) in zip(items, expected):
        if got_name != name:
            raise MismatchError(f"{path}: tensor {got_name!r} where {name!r} "
                                f"expected")
        if got.shape != dst.shape:
            raise MismatchError(f"{path}: {name} has shape {got.shape}, model "
                                f"expects {dst.shape}")
        dst[...] = got
    return model


def checkpoint_checksum(path) -> int:
    """The stored trailing checksum (validates the file first)."""
    read_checkpoint_items(path)
    return struct.unpack("<Q", Path(path).read_bytes()[-8:])[0]
