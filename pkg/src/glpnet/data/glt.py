"""GLT1 tensor files and named tensor bundles.

A GLT1 record is one ASCII header line ``GLT1 <dtype> <ndim> <d0> ... <dn-1>``
terminated by ``\\n``, followed by the row-major values in little-endian
byte order. A bundle (used for checkpoints) is a ``GLTB <count>`` line
followed by ``count`` entries, each a name line and a GLT1 record.
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import BinaryIO

import numpy as np

DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
    "u16": np.dtype("<u2"),
}
_CODES = {v.newbyteorder("<") if v.itemsize > 1 else v: k for k, v in DTYPES.items()}


class FormatError(ValueError):
    """Malformed file contents; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _code_for(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    le = dtype.newbyteorder("<") if dtype.itemsize > 1 else dtype
    try:
        return _CODES[le]
    except KeyError:
        raise ValueError(f"dtype {dtype} has no GLT1 code") from None


def _read_line(fh: BinaryIO, limit: int = 4096) -> tuple[bytes, int]:
    start = fh.tell()
    line = fh.readline(limit)
    if not line.endswith(b"\n"):
        raise FormatError("unterminated header line", start + len(line))
    return line[:-1], start


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _code_for(array.dtype)
    header = " ".join(["GLT1", code, str(array.ndim)] + [str(d) for d in array.shape])
    fh.write(header.encode("ascii") + b"\n")
    fh.write(np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    line, start = _read_line(fh)
    fields = line.split(b" ")
    if fields[0] != b"GLT1":
        raise FormatError(f"bad magic {fields[0][:8]!r}, expected b'GLT1'", start)
    offset = start + len(fields[0]) + 1
    if len(fields) < 3:
        raise FormatError("truncated header", start + len(line))
    code = fields[1].decode("ascii", "replace")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype {code!r}", offset)
    offset += len(fields[1]) + 1
    try:
        ndim = int(fields[2])
        dims = [int(f) for f in fields[3:]]
    except ValueError:
        raise FormatError("non-integer extent in header", offset) from None
    if ndim != len(dims) or any(d < 0 for d in dims):
        raise FormatError(f"header declares {ndim} dims but lists {dims}", offset)
    dtype = DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"expected {count * dtype.itemsize} payload bytes, got {len(payload)}",
                          start + len(line) + 1 + len(payload))
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_bundle(path, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(f"GLTB {len(tensors)}\n".encode("ascii"))
    for name, array in tensors.items():
        if "\n" in name or not name:
            raise ValueError(f"invalid tensor name {name!r}")
        buf.write(name.encode("utf-8") + b"\n")
        write_tensor(buf, array)
    Path(path).write_bytes(buf.getvalue())


def load_bundle(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        line, start = _read_line(fh)
        fields = line.split(b" ")
        if len(fields) != 2 or fields[0] != b"GLTB" or not fields[1].isdigit():
            raise FormatError("bad bundle header, expected 'GLTB <count>'", start)
        out = {}
        for _ in range(int(fields[1])):
            name, _ = _read_line(fh)
            out[name.decode("utf-8")] = read_tensor(fh)
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after last bundle entry", fh.tell() - 1)
    return out
