"""Little-endian binary checkpoints.

Layout::

    b"PKPT" | u32 version | u32 len | descriptor (UTF-8 JSON) | u32 count
    then per tensor: u32 len | name (UTF-8) | u32 ndim | u32 dims[ndim] | f32 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .graph import NetworkGraph

MAGIC = b"PKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def dumps(graph: NetworkGraph) -> bytes:
    desc = json.dumps(graph.descriptor(), sort_keys=True).encode("utf-8")
    tensors = {**{k: v.data for k, v in graph.named_parameters().items()}, **graph.named_buffers()}
    parts = [MAGIC, struct.pack("<II", VERSION, len(desc)), desc, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated: need {n} bytes at offset {self.pos}, "
                                 f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(buf: bytes) -> NetworkGraph:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    try:
        desc = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable architecture descriptor: {exc}") from exc
    graph = NetworkGraph.from_descriptor(desc)
    params = graph.named_parameters()
    buffers = graph.named_buffers()
    count = r.u32()
    seen = set()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        target = params[name].data if name in params else buffers.get(name)
        if target is None:
            raise CheckpointError(f"tensor {name!r} does not exist in the architecture")
        if target.shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, architecture expects {target.shape}")
        target[...] = arr
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise TruncatedError(f"checkpoint is missing tensors: {sorted(missing)}")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    return graph


def save_checkpoint(graph: NetworkGraph, path: Union[str, Path]):
    Path(path).write_bytes(dumps(graph))


def load_checkpoint(path: Union[str, Path]) -> NetworkGraph:
    return loads(Path(path).read_bytes())


def export_descriptor(graph: NetworkGraph) -> str:
    """Human-readable architecture descriptor."""
    return json.dumps(graph.descriptor(), indent=2, sort_keys=True)
