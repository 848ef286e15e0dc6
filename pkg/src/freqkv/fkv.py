"""
FKV1 binary dump format.

Header (36 bytes, little-endian)::

    0   4s   magic "FKV1"
    4   u32  version (1)
    8   u32  num_layers
    12  u32  kv_heads
    16  u32  head_dim
    20  u64  seq_len
    28  u8   dtype (0 = f32, 1 = f16)
    29  7x   reserved, zero

Payload: seq_len tag bytes (0 = text, 1 = vision), then for every layer the
keys followed by the values, each row-major [head][position][channel].
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .cache import KvDump
from .outlier import LayerKv

MAGIC = b"FKV1"
VERSION = 1
HEADER = struct.Struct("<4sIIIIQB7s")
DTYPE_CODES = {"f32": 0, "f16": 1}
NUMPY_DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}


class FormatError(ValueError):
    code = "format_error"


class BadMagicError(FormatError):
    code = "bad_magic"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


class TruncatedPayloadError(FormatError):
    code = "truncated_payload"


class SizeMismatchError(FormatError):
    code = "size_mismatch"


class BadHeaderError(FormatError):
    code = "bad_header"


def payload_size(num_layers: int, kv_heads: int, head_dim: int, seq_len: int, dtype: str) -> int:
    return seq_len + 2 * num_layers * kv_heads * seq_len * head_dim * NUMPY_DTYPES[dtype].itemsize


def encode(dump: KvDump) -> bytes:
    dt = NUMPY_DTYPES[dump.dtype]
    parts = [
        HEADER.pack(MAGIC, VERSION, dump.num_layers, dump.kv_heads, dump.head_dim, dump.seq_len,
                    DTYPE_CODES[dump.dtype], bytes(7)),
        dump.token_tags.astype(np.uint8).tobytes(),
    ]
    for layer in dump.layers:
        parts.append(np.ascontiguousarray(layer.keys, dtype=dt).tobytes())
        parts.append(np.ascontiguousarray(layer.values, dtype=dt).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> KvDump:
    if len(buf) < HEADER.size:
        raise TruncatedPayloadError(f"file holds {len(buf)} bytes, shorter than the {HEADER.size}-byte header")
    magic, version, n_layers, heads, dim, seq_len, dcode, reserved = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    if reserved != bytes(7):
        raise BadHeaderError("reserved header bytes are not zero")
    codes = {v: k for k, v in DTYPE_CODES.items()}
    if dcode not in codes:
        raise BadHeaderError(f"unknown dtype code {dcode}")
    if min(n_layers, heads, dim, seq_len) < 1:
        raise BadHeaderError(f"empty geometry: layers={n_layers} heads={heads} head_dim={dim} seq_len={seq_len}")
    dtype = codes[dcode]
    expected = HEADER.size + payload_size(n_layers, heads, dim, seq_len, dtype)
    if len(buf) < expected:
        raise TruncatedPayloadError(f"truncated payload: expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise SizeMismatchError(f"size mismatch: expected {expected} bytes, got {len(buf)}")

    off = HEADER.size
    tags = np.frombuffer(buf, dtype=np.uint8, count=seq_len, offset=off).copy()
    if np.any(tags > 1):
        bad = int(np.flatnonzero(tags > 1)[0])
        raise BadHeaderError(f"token tag {tags[bad]} at position {bad} is neither 0 (text) nor 1 (vision)")
    off += seq_len
    dt = NUMPY_DTYPES[dtype]
    count = heads * seq_len * dim
    layers = []
    for l in range(n_layers):
        kv = []
        for _ in range(2):
            a = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(heads, seq_len, dim)
            kv.append(a.astype(np.float32))
            off += count * dt.itemsize
        layers.append(LayerKv(kv[0], kv[1], l))
    return KvDump(layers, tags, dtype)


def write_dump(dump: KvDump, path) -> None:
    Path(path).write_bytes(encode(dump))


def read_dump(path) -> KvDump:
    return decode(Path(path).read_bytes())
