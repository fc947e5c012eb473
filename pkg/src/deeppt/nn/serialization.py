"""DPT1 weights container.

Layout (little-endian)::

    b"DPT1"  u32 version  u32 entry-count
    per entry: u32 name-length, UTF-8 name, u32 rank, u32 extents[rank],
               float32 data (row-major)
    u32 CRC32 of every preceding byte

Entry names follow :meth:`NetworkParams.named_arrays`: ``conv.<i>.weight``,
``conv.<i>.bias``, ``<head>.<j>.weight``, ``<head>.<j>.bias``.
"""
import os
import struct
import zlib

import numpy as np

from .network import ConvLayer, DenseLayer, NetworkParams

MAGIC = b"DPT1"
VERSION = 1


class CorruptFileError(ValueError):
    """The file is not a valid DPT1 container."""


def dumps_params(params):
    named = params.named_arrays()
    parts = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_params(params, path):
    """Write ``params`` atomically (temp file + rename)."""
    data = dumps_params(params)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptFileError(
                f"truncated file: needed {n} bytes at offset {self.pos}, "
                f"{len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def loads_params(data):
    if len(data) < 4 or data[:4] != MAGIC:
        raise CorruptFileError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    if len(data) < 16:
        raise CorruptFileError("truncated file: header incomplete")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    reader = _Reader(payload)
    reader.take(4)
    version = reader.u32()
    if version != VERSION:
        raise CorruptFileError(f"unsupported version {version}, expected {VERSION}")
    count = reader.u32()
    arrays = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8", errors="strict")
        rank = reader.u32()
        if rank > 4:
            raise CorruptFileError(f"{name}: rank {rank} exceeds 4")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        if any(extent < 1 for extent in shape):
            raise CorruptFileError(f"{name}: zero extent in shape {shape}")
        size = int(np.prod(shape))
        arr = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape)
        arrays[name] = arr.astype(np.float32)
    if reader.pos != len(payload):
        raise CorruptFileError(f"{len(payload) - reader.pos} unexpected trailing bytes")
    if zlib.crc32(payload) != crc:
        raise CorruptFileError("CRC32 mismatch")
    return _assemble(arrays)


def load_params(path):
    with open(path, "rb") as fh:
        return loads_params(fh.read())


def _assemble(arrays):
    conv, heads = {}, {}
    for name, arr in arrays.items():
        try:
            group, idx, attr = name.rsplit(".", 2)
            idx = int(idx)
        except ValueError:
            raise CorruptFileError(f"unrecognised entry name {name!r}") from None
        if attr not in ("weight", "bias"):
            raise CorruptFileError(f"unrecognised entry name {name!r}")
        slot = conv if group == "conv" else heads.setdefault(group, {})
        slot.setdefault(idx, {})[attr] = arr
    try:
        return NetworkParams(
            conv=[ConvLayer(**conv[i]) for i in range(len(conv))],
            heads={
                head: [DenseLayer(**layers[j]) for j in range(len(layers))]
                for head, layers in heads.items()
            },
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"inconsistent shape table: {exc}") from exc
