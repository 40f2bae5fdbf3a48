"""Binary tensor container and flat key-value config files.

Single tensor file::

    b"FSTA1" | dtype u8 (0=f32, 1=f64) | rank u32 | extents u32*rank | values

Named archive (checkpoints), distinguished by the marker byte 0xFE where a
single file carries its dtype tag::

    b"FSTA1" | 0xFE | count u32 | count * (name_len u32 | utf-8 name | dtype | rank | extents | values)

All integers and values are little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping, Union

import numpy as np

from .tensor import Tensor

MAGIC = b"FSTA1"
ARCHIVE_MARKER = 0xFE
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, Path]


class FormatError(ValueError):
    """Raised for truncated or malformed container files."""


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated container: wanted {n} bytes, got {len(buf)}")
    return buf


def _write_record(fh: BinaryIO, arr: np.ndarray) -> None:
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    fh.write(struct.pack("<B", tag))
    _write_body(fh, arr)


def _write_body(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())


def _read_body(fh: BinaryIO, tag: int) -> np.ndarray:
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    if rank > 32:
        raise FormatError(f"implausible rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    if any(s < 1 for s in shape):
        raise FormatError(f"invalid extents {shape}")
    dt = _DTYPES[tag]
    n = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(_read_exact(fh, n * dt.itemsize), dtype=dt).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def _check_magic(fh: BinaryIO) -> None:
    if fh.read(len(MAGIC)) != MAGIC:
        raise FormatError("bad magic: not an FSTA1 container")


def dumps_tensor(t: Tensor) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    _write_record(fh, t.data)
    return fh.getvalue()


def loads_tensor(buf: bytes) -> Tensor:
    fh = io.BytesIO(buf)
    _check_magic(fh)
    (tag,) = struct.unpack("<B", _read_exact(fh, 1))
    if tag == ARCHIVE_MARKER:
        raise FormatError("file is a named archive, use load_archive")
    arr = _read_body(fh, tag)
    if fh.read(1):
        raise FormatError("trailing bytes after tensor record")
    return Tensor(arr)


def save_tensor(path: PathLike, t: Tensor) -> None:
    Path(path).write_bytes(dumps_tensor(t))


def load_tensor(path: PathLike) -> Tensor:
    return loads_tensor(Path(path).read_bytes())


def dumps_archive(entries: Mapping[str, Tensor]) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<BI", ARCHIVE_MARKER, len(entries)))
    for name, t in entries.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        _write_record(fh, t.data)
    return fh.getvalue()


def loads_archive(buf: bytes) -> Dict[str, Tensor]:
    fh = io.BytesIO(buf)
    _check_magic(fh)
    marker, count = struct.unpack("<BI", _read_exact(fh, 5))
    if marker != ARCHIVE_MARKER:
        raise FormatError("file is a single tensor, not a named archive")
    out: Dict[str, Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, n).decode("utf-8")
        (tag,) = struct.unpack("<B", _read_exact(fh, 1))
        out[name] = Tensor(_read_body(fh, tag))
    if fh.read(1):
        raise FormatError("trailing bytes after archive")
    return out


def save_archive(path: PathLike, entries: Mapping[str, Tensor]) -> None:
    Path(path).write_bytes(dumps_archive(entries))


def load_archive(path: PathLike) -> Dict[str, Tensor]:
    return loads_archive(Path(path).read_bytes())


def dump_kv(mapping: Mapping[str, object]) -> str:
    """Render a flat mapping as ``key = value`` lines."""
    lines = []
    for k, v in mapping.items():
        if "\n" in str(v) or "=" in k:
            raise ValueError(f"cannot encode {k!r}")
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
