"""Named-tensor checkpoint archive.

Layout (all integers little-endian)::

    b"BAPMCKPT" | u32 version | u32 entry count
    per entry:  u16 name length | name (utf-8) | u8 dtype (0 = f32) | u8 ndim
                | u32 dim * ndim | payload (f32 little-endian, C order)
    metadata:   u32 pair count | per pair: u32 key length | key | u32 value length | value

Metadata pairs are written sorted by key so identical states give identical
bytes.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

MAGIC = b"BAPMCKPT"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    entries: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = VERSION


def _as_array(value) -> np.ndarray:
    return np.asarray(getattr(value, "data", value), dtype=np.float32)


def encode_checkpoint(named_params: Mapping, metadata: Mapping[str, object] | None = None) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(named_params))
    for name, value in named_params.items():
        arr = _as_array(value)
        bname = name.encode("utf-8")
        if len(bname) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        out += struct.pack("<H", len(bname)) + bname
        out += struct.pack("<BB", DTYPE_F32, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    meta = {str(k): str(v) for k, v in (metadata or {}).items()}
    out += struct.pack("<I", len(meta))
    for k in sorted(meta):
        bk, bv = k.encode("utf-8"), meta[k].encode("utf-8")
        out += struct.pack("<I", len(bk)) + bk + struct.pack("<I", len(bv)) + bv
    return bytes(out)


def save_checkpoint(named_params: Mapping, metadata: Mapping[str, object] | None, path) -> None:
    blob = encode_checkpoint(named_params, metadata)
    tmp = f"{os.fspath(path)}.part"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def decode_checkpoint(raw: bytes, prefix: str | None = None) -> Checkpoint:
    r = _Reader(raw)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a BAPM checkpoint (bad magic)")
    version, count = r.unpack("II", "header")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("H", "entry name length")
        name = r.take(nlen, "entry name").decode("utf-8")
        dtype, ndim = r.unpack("BB", f"{name} dtype")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{name}: unsupported dtype code {dtype}")
        shape = r.unpack(f"{ndim}I", f"{name} dims")
        nbytes = 4 * int(np.prod(shape))
        payload = r.take(nbytes, f"{name} payload")
        if name in entries:
            raise CheckpointError(f"duplicate entry {name}")
        if prefix is None or name.startswith(prefix):
            entries[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    (npairs,) = r.unpack("I", "metadata count")
    metadata = {}
    for _ in range(npairs):
        (klen,) = r.unpack("I", "metadata key length")
        key = r.take(klen, "metadata key").decode("utf-8")
        (vlen,) = r.unpack("I", "metadata value length")
        metadata[key] = r.take(vlen, "metadata value").decode("utf-8")
    return Checkpoint(entries, metadata, version)


def load_checkpoint(path, prefix: str | None = None) -> Checkpoint:
    """Read a checkpoint; with ``prefix`` only entries whose name starts with
    it are returned."""
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), prefix)


def params_digest(named_params: Mapping, prefix: str = "") -> str:
    """SHA-256 over names, shapes and raw bytes of the selected parameters."""
    h = hashlib.sha256()
    for name in sorted(named_params):
        if not name.startswith(prefix):
            continue
        arr = _as_array(named_params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
