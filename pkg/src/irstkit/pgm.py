"""Binary (P5) PGM reading and writing.

Values are normalized to [0,1] on load; 16-bit samples are big-endian per the
format. Chosen over compressed formats so generated fixtures stay bit-exact.
"""

from __future__ import annotations

import numpy as np


class PgmError(ValueError):
    pass


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise PgmError(f"unexpected end of header at byte {pos}")
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _next_token(data, 0)
    if magic != b"P5":
        raise PgmError(f"bad magic {magic!r} at byte 0, expected P5")
    try:
        wtok, pos = _next_token(data, pos)
        width = int(wtok)
        htok, pos = _next_token(data, pos)
        height = int(htok)
        mtok, pos = _next_token(data, pos)
        maxval = int(mtok)
    except ValueError as exc:
        raise PgmError(f"malformed header near byte {pos}: {exc}") from None
    if maxval not in (255, 65535):
        raise PgmError(f"unsupported maxval {maxval} at byte {pos}")
    pos += 1  # single whitespace byte after maxval
    nbytes = width * height * (1 if maxval == 255 else 2)
    raster = data[pos : pos + nbytes]
    if len(raster) != nbytes:
        raise PgmError(
            f"truncated raster at byte {pos}: need {nbytes} bytes, have {len(raster)}"
        )
    dtype = np.dtype(">u2") if maxval == 65535 else np.uint8
    arr = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return arr.astype(np.float64) / maxval


def save_pgm(array: np.ndarray, path, depth: int = 8) -> None:
    if depth not in (8, 16):
        raise ValueError(f"depth must be 8 or 16, got {depth}")
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected 2-D array, got shape {a.shape}")
    maxval = 255 if depth == 8 else 65535
    q = np.clip(np.round(a * maxval), 0, maxval)
    raster = q.astype(np.uint8 if depth == 8 else np.dtype(">u2")).tobytes()
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + raster)
