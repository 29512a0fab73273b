"""Versioned binary checkpoints.

Layout (all integers unsigned 32-bit little-endian)::

    b"SMN1"
    version
    arch_len, arch_len bytes of UTF-8 "key=value\\n" lines
    for each parameter tensor in build order:
        name_len, name_len bytes of UTF-8 name
        rank, rank x dim
        prod(dims) float64 little-endian values, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, CheckpointError, CheckpointShapeError, ConfigError,
                     TruncatedCheckpointError, UnsupportedVersionError)
from .network import ArchitectureConfig, Network, build

MAGIC = b"SMN1"
VERSION = 1
_U32 = struct.Struct("<I")
_FLOAT_FIELDS = {"dropout_rate"}


def encode_architecture(config: ArchitectureConfig) -> bytes:
    lines = []
    for key, value in config.as_dict().items():
        lines.append(f"{key}={float(value)!r}" if key in _FLOAT_FIELDS else f"{key}={int(value)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_architecture(blob: bytes) -> ArchitectureConfig:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"architecture block is not UTF-8: {exc}") from exc
    fields = {}
    known = ArchitectureConfig.__dataclass_fields__
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or key not in known:
            raise CheckpointError(f"bad architecture line {line!r}")
        fields[key] = float(value) if key in _FLOAT_FIELDS else int(value)
    missing = set(known) - set(fields)
    if missing:
        raise CheckpointError(f"architecture block lacks {sorted(missing)}")
    try:
        return ArchitectureConfig(**fields)
    except ConfigError as exc:
        raise CheckpointError(f"invalid architecture: {exc}") from exc


def dumps(net: Network) -> bytes:
    arch = encode_architecture(net.config)
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(arch)), arch]
    for name, array in net.named_parameters():
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(array.ndim)]
        parts += [_U32.pack(d) for d in array.shape]
        parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"file ends inside {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def loads(data: bytes) -> Network:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    config = decode_architecture(r.take(r.u32("architecture length"), "architecture block"))
    net = build(config, seed=0)
    for expected_name, target in net.named_parameters():
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8", "replace")
        if name != expected_name:
            raise CheckpointShapeError(f"tensor {name!r} found where {expected_name!r} was expected")
        rank = r.u32(f"{name} rank")
        dims = tuple(r.u32(f"{name} dims") for _ in range(rank))
        if dims != target.shape:
            raise CheckpointShapeError(
                f"{name} has dims {dims} but the architecture needs {target.shape}")
        payload = r.take(8 * target.size, f"{name} payload")
        target[...] = np.frombuffer(payload, dtype="<f8").reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    return net


def save(net: Network, path) -> int:
    """Write atomically (temp file + rename); returns the byte count."""
    blob = dumps(net)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(blob)


def load(path) -> Network:
    with open(path, "rb") as fh:
        return loads(fh.read())
