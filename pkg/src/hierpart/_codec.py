"""Packing helpers for protocol payloads.

Messages on the simulated network are raw bytes; these helpers give the
protocols a compact, deterministic packed form (little-endian int64/float64
arrays with explicit length framing).
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

_I64 = np.dtype("<i8")
_F64 = np.dtype("<f8")
_LEN = struct.Struct("<q")


def pack_i64(values: Iterable[int]) -> bytes:
    return np.asarray(list(values), dtype=_I64).tobytes()


def unpack_i64(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=_I64)


def pack_f64(values: Iterable[float]) -> bytes:
    return np.asarray(list(values), dtype=_F64).tobytes()


def unpack_f64(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=_F64)


def pack_blocks(blocks: Sequence[bytes]) -> bytes:
    """Length-prefixed concatenation of byte blocks."""
    parts = [_LEN.pack(len(blocks))]
    for b in blocks:
        parts.append(_LEN.pack(len(b)))
        parts.append(b)
    return b"".join(parts)


def unpack_blocks(data: bytes) -> list[bytes]:
    (n,) = _LEN.unpack_from(data, 0)
    off = _LEN.size
    out = []
    for _ in range(n):
        (ln,) = _LEN.unpack_from(data, off)
        off += _LEN.size
        out.append(data[off:off + ln])
        off += ln
    return out


def pack_kv(pairs: Sequence[tuple[int, bytes]]) -> bytes:
    """Pack (int key, byte value) pairs preserving order."""
    keys = pack_i64(k for k, _ in pairs)
    values = pack_blocks([v for _, v in pairs])
    return pack_blocks([keys, values])


def unpack_kv(data: bytes) -> list[tuple[int, bytes]]:
    keys_raw, values_raw = unpack_blocks(data)
    keys = unpack_i64(keys_raw)
    values = unpack_blocks(values_raw)
    return [(int(k), v) for k, v in zip(keys, values)]
