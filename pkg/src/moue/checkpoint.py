"""Named-tensor binary checkpoints.

Layout, all integers little-endian::

    b"MOUE"                      magic
    u32  version                 (1)
    u32  metadata byte length, then UTF-8 "key=value\\n" lines
    u32  tensor count
    per tensor:
        u32 name length, UTF-8 name
        u8  dtype code           (0 = float64 LE)
        u32 rank, then rank x u64 dims
        raw row-major payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MOUE"
VERSION = 1
DTYPE_F64 = 0


class CheckpointError(ValueError):
    code = "format"


class BadMagicError(CheckpointError):
    code = "bad magic"


class VersionMismatchError(CheckpointError):
    code = "version mismatch"


class TruncatedError(CheckpointError):
    code = "truncated"


@dataclass
class Checkpoint:
    metadata: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.metadata != other.metadata or list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and a.astype("<f8").tobytes() == b.astype("<f8").tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def _encode_metadata(meta: dict[str, str]) -> bytes:
    lines = []
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"invalid metadata entry {k!r}")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    meta = _encode_metadata(ckpt.metadata)
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<BI", DTYPE_F64, a.ndim)
        out += struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.tobytes(order="C")
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedError("truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < 4 or bytes(r.take(4)) != MAGIC:
        raise BadMagicError("bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: {version} != {VERSION}")
    (mlen,) = r.unpack("<I")
    meta: dict[str, str] = {}
    for line in bytes(r.take(mlen)).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = bytes(r.take(nlen)).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        dtype, rank = r.unpack("<BI")
        if dtype != DTYPE_F64:
            raise CheckpointError(f"unsupported dtype code {dtype}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(8 * n)
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(tuple(dims))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return Checkpoint(meta, tensors)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(ckpt))
