"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"STNI" | version u32 | entry count u32 |
    per entry: name length u16, UTF-8 name, rank u8, extents u32 x rank,
               float32 values (little-endian, row-major)

Metadata (configs, phase, RNG state) travels as one extra entry named
``__meta__`` holding the UTF-8 bytes of a JSON document, one byte per value.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"STNI"
VERSION = 1
META_KEY = "__meta__"

__all__ = ["CheckpointError", "CheckpointMismatchError", "Checkpoint", "save_checkpoint",
           "load_checkpoint", "encode", "decode", "apply_state"]


class CheckpointError(ValueError):
    """Corrupt, truncated or unsupported checkpoint file."""


class CheckpointMismatchError(ValueError):
    """Checkpoint entries do not fit the receiving model."""


@dataclass
class Checkpoint:
    entries: OrderedDict = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)

    def module_state(self, prefix: str) -> OrderedDict:
        p = prefix if prefix.endswith(".") else prefix + "."
        return OrderedDict((k[len(p):], v) for k, v in self.entries.items() if k.startswith(p))

    def has_module(self, prefix: str) -> bool:
        return len(self.module_state(prefix)) > 0


def encode(entries: dict, meta: dict | None = None) -> bytes:
    items = list(entries.items())
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        items.append((META_KEY, np.frombuffer(blob, dtype=np.uint8).astype(np.float32)))
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ValueError(f"rank too large for {name}")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    def need(pos, n):
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")

    need(0, 12)
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    entries: OrderedDict = OrderedDict()
    meta: dict = {}
    for _ in range(count):
        need(pos, 2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, nlen + 1)
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt entry name") from exc
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(pos, 4 * rank)
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(shape, dtype=np.int64))
        need(pos, 4 * n)
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        if name == META_KEY:
            meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
        else:
            entries[name] = arr.astype(np.float32)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return Checkpoint(entries, meta)


def save_checkpoint(path, entries: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(entries, meta))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)


def apply_state(module, state: dict) -> None:
    """Load ``state`` into ``module`` position by position.

    Raises :class:`CheckpointMismatchError` naming the first model entry
    whose shape (or, failing that, name) disagrees.
    """
    expected = module.state_dict()
    got = list(state.items())
    for i, (name, ref) in enumerate(expected.items()):
        if i >= len(got):
            raise CheckpointMismatchError(f"checkpoint has no entry for parameter {name!r}")
        cname, arr = got[i]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointMismatchError(
                f"shape mismatch for parameter {name!r}: checkpoint {tuple(arr.shape)} "
                f"vs model {tuple(ref.shape)}")
        if cname != name:
            raise CheckpointMismatchError(f"name mismatch: model {name!r}, checkpoint {cname!r}")
    if len(got) != len(expected):
        raise CheckpointMismatchError(
            f"checkpoint has {len(got)} entries, model expects {len(expected)}")
    module.load_state_dict(dict(state))
