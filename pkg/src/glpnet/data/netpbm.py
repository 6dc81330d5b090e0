"""Binary PPM (P6) and PGM (P5) read/write, 8- and 16-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from glpnet.data.glt import FormatError

_SPACE = (b" ", b"\t", b"\r", b"\n")


def _header_tokens(buf: bytes, count: int) -> tuple[list[tuple[int, int]], int]:
    """Return ``count`` (value, offset) tokens after the magic and the payload start."""
    pos, tokens = 2, []
    while len(tokens) < count:
        if pos >= len(buf):
            raise FormatError("truncated header", pos)
        ch = buf[pos:pos + 1]
        if ch in _SPACE:
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment", pos)
            pos = end + 1
        else:
            start = pos
            while pos < len(buf) and buf[pos:pos + 1] not in _SPACE + (b"#",):
                pos += 1
            word = buf[start:pos]
            if not word.isdigit():
                raise FormatError(f"expected a decimal integer, got {word[:12]!r}", start)
            tokens.append((int(word), start))
    if pos >= len(buf) or buf[pos:pos + 1] not in _SPACE:
        raise FormatError("missing whitespace before raster", pos)
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file: ``[H, W]`` for PGM, ``[H, W, 3]`` for PPM."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {magic!r}, expected b'P5' or b'P6'", 0)
    tokens, start = _header_tokens(buf, 3)
    (width, w_off), (height, h_off), (maxval, m_off) = tokens
    if width < 1:
        raise FormatError("width must be positive", w_off)
    if height < 1:
        raise FormatError("height must be positive", h_off)
    if not 1 <= maxval <= 65535:
        raise FormatError(f"maxval {maxval} outside [1, 65535]", m_off)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * channels * dtype.itemsize
    raster = buf[start:start + nbytes]
    if len(raster) != nbytes:
        raise FormatError(f"raster needs {nbytes} bytes, found {len(raster)}", start + len(raster))
    arr = np.frombuffer(raster, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    if arr.max(initial=0) > maxval:
        raise FormatError(f"sample exceeds maxval {maxval}", start)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs uint8 [H,W,3], got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype not in (np.uint8, np.uint16):
        raise ValueError(f"PGM needs uint8/uint16 [H,W], got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    maxval = 255 if gray.dtype == np.uint8 else 65535
    raster = gray.tobytes() if maxval == 255 else gray.astype(">u2").tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + raster)


def heatmap_bytes(x: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes all 128."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.full(x.shape, 128, dtype=np.uint8)
    return np.round((x - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm_heatmap(x: np.ndarray, path) -> None:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"heatmap needs a 2-D map, got shape {x.shape}")
    write_pgm(path, heatmap_bytes(x))
