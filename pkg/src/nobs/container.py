"""Framed binary files: 8-byte magic, uint32 LE header length, JSON header, f8 payload."""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import BadMagic, HeaderMismatch, IoError, TruncatedPayload

LE_F8 = np.dtype("<f8")


def write_container(path, magic, header, arrays):
    """Write ``arrays`` (in order) after the header; returns bytes written."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            n = 12 + len(blob)
            for arr in arrays:
                data = np.ascontiguousarray(arr, dtype=LE_F8).tobytes()
                fh.write(data)
                n += len(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return n


def read_container(path, magic):
    """Return ``(header, payload)`` where payload is a flat little-endian f8 array."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:8] != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}, found {raw[:8]!r}")
    if len(raw) < 12:
        raise TruncatedPayload(f"{path}: file ends inside the header length")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise TruncatedPayload(f"{path}: file ends inside the header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMismatch(f"{path}: unreadable header: {exc}") from exc
    body = raw[12 + hlen :]
    if len(body) % 8:
        raise HeaderMismatch(f"{path}: payload is not a whole number of float64 values")
    return header, np.frombuffer(body, dtype=LE_F8)


def split_payload(payload, shapes, path=""):
    """Cut a flat payload into arrays of the declared shapes, checking its length."""
    sizes = [int(np.prod(s, dtype=np.int64)) for s in shapes]
    need = sum(sizes)
    if payload.size < need:
        raise TruncatedPayload(f"{path}: header declares {need} values, payload holds {payload.size}")
    if payload.size > need:
        raise HeaderMismatch(f"{path}: payload holds {payload.size - need} values beyond the header")
    out, pos = [], 0
    for shape, size in zip(shapes, sizes):
        out.append(payload[pos : pos + size].astype(np.float64).reshape(shape))
        pos += size
    return out
