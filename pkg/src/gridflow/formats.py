"""Binary container plumbing shared by the movie, mask and checkpoint files.

All three formats are little-endian and start with a 4-byte magic followed by
a u16 format version. Readers are strict: wrong magic, short payloads and
trailing garbage each raise a distinct :class:`FormatError` subclass.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
U32_MAX = 2**32 - 1

CHECKPOINT_MAGIC = b"GFCK"


class FormatError(ValueError):
    """Base class for malformed container files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ExtentOverflowError(FormatError):
    pass


class TrailingDataError(FormatError):
    pass


class ByteReader:
    """Cursor over a bytes buffer that raises TruncatedPayloadError on short reads."""

    def __init__(self, buf: bytes, what: str = "file"):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"{self.what}: needed {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return bytes(self.take(n)).decode("utf-8")

    def header(self, magic: bytes) -> int:
        got = bytes(self.take(4)) if len(self.buf) >= 4 else bytes(self.buf)
        if got != magic:
            raise BadMagicError(f"{self.what}: expected magic {magic!r}, found {got!r}")
        (version,) = self.unpack("<H")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"{self.what}: unsupported format version {version}")
        return version

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise TrailingDataError(f"{self.what}: {len(self.buf) - self.pos} unexpected trailing bytes")


def pack_header(magic: bytes) -> bytes:
    return magic + struct.pack("<H", FORMAT_VERSION)


def pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ExtentOverflowError("string longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


def pack_extents(extents) -> bytes:
    for e in extents:
        if not 0 <= int(e) <= U32_MAX:
            raise ExtentOverflowError(f"extent {e} does not fit in u32")
    return struct.pack(f"<{len(extents)}I", *[int(e) for e in extents])


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_checkpoint(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named float32 arrays in the "GFCK" layout.

    Layout: magic, u16 version, u32 array count, then per array a u16-prefixed
    UTF-8 name, u8 rank, u32 extents and raw little-endian float32 values.
    """
    parts = [pack_header(CHECKPOINT_MAGIC), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ExtentOverflowError(f"{name}: rank {arr.ndim} does not fit in u8")
        parts.append(pack_string(name))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(pack_extents(arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    atomic_write(path, b"".join(parts))


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        r = ByteReader(f.read(), what=f"checkpoint {os.fspath(path)}")
    r.header(CHECKPOINT_MAGIC)
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(4 * n)
        if name in arrays:
            raise FormatError(f"duplicate parameter name {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    r.finish()
    return arrays
