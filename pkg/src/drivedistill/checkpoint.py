"""Versioned binary container for named arrays with a content checksum.

Layout (all integers little-endian):

    magic   8 bytes  b"DDTENS\\x00\\x01"
    u32     header length, then that many bytes of JSON metadata
    u32     entry count
    entries name(u16 len + utf8), dtype(u8 len + ascii), ndim(u8),
            dims(u64 each), payload(u64 byte count + raw little-endian data)
    footer  b"SHA256--" + 32-byte digest of everything before the footer

Entries are written in sorted name order so identical contents give
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DDTENS\x00\x01"
FOOTER = b"SHA256--"


def _encode(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC]
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(header)))
    parts.append(header)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        nb = name.encode()
        dt = arr.dtype.str.lstrip("<>=|").encode()  # e.g. f8, u1, i8
        payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", len(dt)))
        parts.append(dt)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    body = b"".join(parts)
    return body + FOOTER + hashlib.sha256(body).digest()


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write the container; returns the hex content checksum."""
    blob = _encode(arrays, meta or {})
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    foot = blob.rfind(FOOTER)
    if foot < 0 or len(blob) != foot + len(FOOTER) + 32:
        raise ValueError(f"{path}: truncated container")
    body, digest = blob[:foot], blob[foot + len(FOOTER) :]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch, file is corrupt")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off : off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode()
        off += nlen
        (dlen,) = struct.unpack_from("<B", body, off)
        off += 1
        dtype = np.dtype(body[off : off + dlen].decode()).newbyteorder("<")
        off += dlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, off) if ndim else ()
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", body, off)
        off += 8
        arrays[name] = np.frombuffer(body[off : off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
    return arrays, meta


def checksum_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
