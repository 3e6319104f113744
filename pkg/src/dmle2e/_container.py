"""Binary artifact container: 8-byte magic, JSON header, float64 blob.

Layout: magic | u64-LE header length | UTF-8 JSON (sorted keys) | payload.
Used for surrogate models, transmitter/receiver parameter sets and eye
matrices so every binary artifact is self-describing and byte-stable.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError


def pack(magic: bytes, header: dict, blobs: list[np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blobs)
    return magic + struct.pack("<Q", len(head)) + head + payload


def unpack(data: bytes, magic: bytes) -> tuple[dict, np.ndarray]:
    if len(data) < 16:
        raise FormatError("container truncated before header")
    if data[:8] != magic:
        raise FormatError(f"bad magic {data[:8]!r}, expected {magic!r}")
    (head_len,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + head_len:
        raise FormatError("container truncated inside header")
    try:
        header = json.loads(data[16 : 16 + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable container header: {exc}") from exc
    payload = data[16 + head_len :]
    if len(payload) % 8 != 0:
        raise FormatError("container payload is not a whole number of float64")
    return header, np.frombuffer(payload, dtype="<f8")


def split_blob(flat: np.ndarray, shapes: list[tuple]) -> list[np.ndarray]:
    out = []
    pos = 0
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        if pos + size > flat.size:
            raise FormatError("container payload shorter than declared shapes")
        out.append(flat[pos : pos + size].reshape(shape).copy())
        pos += size
    if pos != flat.size:
        raise FormatError("container payload longer than declared shapes")
    return out
