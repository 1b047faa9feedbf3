"""GSMK1 binary container.

Layout: the 6 magic bytes ``GSMK1\\n``, a little-endian uint32 header length,
a UTF-8 JSON header, then the concatenated little-endian array payloads in
row-major order. Each header entry names its payload's byte offset (relative
to the start of the payload section), shape and dtype.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedPayloadError, VersionMismatchError

MAGIC = b"GSMK1\n"
FORMAT_VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def write(path, arrays: list, header: dict) -> None:
    """Write ``arrays`` (list of (dtype_code, ndarray)) with ``header``.

    ``header`` must not contain the reserved ``version`` or ``payloads`` keys.
    """
    payloads, offset = [], 0
    chunks = []
    for code, arr in arrays:
        a = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        payloads.append({"offset": offset, "shape": list(a.shape), "dtype": code})
        raw = a.tobytes()
        chunks.append(raw)
        offset += len(raw)
    head = dict(header, version=FORMAT_VERSION, payloads=payloads)
    hb = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for c in chunks:
            fh.write(c)


def read(path) -> tuple[dict, list]:
    """Return (header, arrays). Raises a ContainerError subclass on damage."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) or blob[:4] != MAGIC[:4] or blob[5:6] != MAGIC[5:6]:
        raise BadMagicError(f"{path}: bad magic")
    if blob[:6] != MAGIC:
        raise VersionMismatchError(f"{path}: unsupported container version {blob[4:5]!r}")
    if len(blob) < 10:
        raise TruncatedPayloadError(f"{path}: truncated payload (no header length)")
    (hlen,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + hlen:
        raise TruncatedPayloadError(f"{path}: truncated payload (header cut short)")
    try:
        head = json.loads(blob[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedPayloadError(f"{path}: truncated payload (unreadable header: {exc})") from None
    if head.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: header version {head.get('version')!r}")
    body = memoryview(blob)[10 + hlen:]
    arrays, end = [], 0
    for p in head["payloads"]:
        dt = _DTYPES[p["dtype"]]
        n = int(np.prod(p["shape"], dtype=np.int64)) * dt.itemsize
        lo, hi = p["offset"], p["offset"] + n
        if lo != end:
            raise TruncatedPayloadError(
                f"{path}: truncated payload (payload at offset {lo} does not follow the "
                f"previous one, which ends at {end}; declared shapes are inconsistent)")
        if hi > len(body):
            raise TruncatedPayloadError(
                f"{path}: truncated payload (declared shape {p['shape']} needs {hi} bytes, "
                f"found {len(body)})")
        arrays.append(np.frombuffer(body[lo:hi], dtype=dt).reshape(p["shape"]).copy())
        end = hi
    if end != len(body):
        raise TruncatedPayloadError(
            f"{path}: truncated payload (declared {end} payload bytes, found {len(body)})")
    return head, arrays
