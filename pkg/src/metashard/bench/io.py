"""Readers and writers for the ``.fvecs`` / ``.bvecs`` / ``.ivecs`` formats.

Each record is a little-endian int32 dimension ``d`` followed by ``d``
elements: float32 for fvecs, uint8 for bvecs, int32 for ivecs.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from metashard.errors import FormatError

_ELEM = {
    "fvecs": np.dtype("<f4"),
    "bvecs": np.dtype("u1"),
    "ivecs": np.dtype("<i4"),
}


def guess_format(path) -> str:
    ext = Path(path).suffix.lstrip(".").lower()
    if ext not in _ELEM:
        raise ValueError(f"cannot infer vector format from extension {ext!r}")
    return ext


def parse_vectors(raw: bytes, fmt: str) -> np.ndarray:
    """Decode an in-memory vector file.

    fvecs and bvecs decode to float32 (bytes widened); ivecs stays int32.

    Raises:
        FormatError: nonpositive or inconsistent dimension, or truncation;
            ``offset`` points at the offending record header.
    """
    elem = _ELEM[fmt]
    out_dtype = np.int32 if fmt == "ivecs" else np.float32
    size = len(raw)
    if size == 0:
        return np.empty((0, 0), dtype=out_dtype)
    if size < 4:
        raise FormatError("truncated record header", 0)
    d = int(np.frombuffer(raw, dtype="<i4", count=1)[0])
    if d <= 0:
        raise FormatError(f"nonpositive dimension {d}", 0)
    rec = 4 + elem.itemsize * d
    n = size // rec
    # Walk every header so a bad one is reported at its own offset.
    headers = np.frombuffer(raw, dtype=np.uint8, count=n * rec).reshape(n, rec)[:, :4]
    dims = headers.copy().view("<i4").ravel()
    bad = np.flatnonzero(dims != d)
    if len(bad):
        off = int(bad[0]) * rec
        raise FormatError(f"record dimension {int(dims[bad[0]])} differs from {d}", off)
    if size % rec:
        off = n * rec
        if size - off >= 4:
            d2 = int(np.frombuffer(raw, dtype="<i4", count=1, offset=off)[0])
            if d2 != d:
                raise FormatError(f"record dimension {d2} differs from {d}", off)
        raise FormatError("truncated record", off)
    body = np.frombuffer(raw, dtype=np.uint8).reshape(n, rec)[:, 4:]
    return body.copy().view(elem).reshape(n, d).astype(out_dtype)


def read_vectors(path, fmt: str | None = None) -> np.ndarray:
    """Load a vector file; ``fmt`` defaults to the file extension."""
    fmt = fmt or guess_format(path)
    with open(path, "rb") as fh:
        return parse_vectors(fh.read(), fmt)


def encode_vectors(data, fmt: str) -> bytes:
    elem = _ELEM[fmt]
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError("expected a 2-d array")
    n, d = arr.shape
    if n == 0:
        return b""
    if fmt == "bvecs" and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("bvecs values must lie in [0, 255]")
    rec = np.empty((n, 4 + elem.itemsize * d), dtype=np.uint8)
    rec[:, :4] = np.frombuffer(np.int32(d).astype("<i4").tobytes(), dtype=np.uint8)
    rec[:, 4:] = np.ascontiguousarray(arr.astype(elem)).view(np.uint8).reshape(n, -1)
    return rec.tobytes()


def write_vectors(path, data, fmt: str | None = None) -> None:
    fmt = fmt or guess_format(path)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_vectors(data, fmt))
    os.replace(tmp, path)
