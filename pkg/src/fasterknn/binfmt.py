"""Little-endian binary container shared by the cluster-store and datastore files.

Every file starts with::

    magic  b"HKNN"
    u32    format version
    u32    vector dimension d
    u8     flavor tag (0=vanilla, 1=fast, 2=faster, 3=cluster map)

followed by a flavor-specific body.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import StoreFormatError

MAGIC = b"HKNN"
VERSION = 1

FLAVOR_VANILLA = 0
FLAVOR_FAST = 1
FLAVOR_FASTER = 2
FLAVOR_CLUSTERS = 3

FLAVOR_NAMES = {
    FLAVOR_VANILLA: "vanilla",
    FLAVOR_FAST: "fast",
    FLAVOR_FASTER: "faster",
    FLAVOR_CLUSTERS: "clusters",
}


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def header(self, d: int, flavor: int) -> None:
        self._parts.append(MAGIC + struct.pack("<IIB", VERSION, d, flavor))

    def u8(self, v: int) -> None:
        self._parts.append(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v))

    def i64(self, v: int) -> None:
        self._parts.append(struct.pack("<q", v))

    def f32s(self, arr) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def u64s(self, arr) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype="<u8").tobytes())

    def i64s(self, arr) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype="<i8").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> memoryview:
        if n < 0 or self._pos + n > len(self._data):
            raise StoreFormatError(
                f"truncated file: wanted {n} bytes at offset {self._pos}, "
                f"{len(self._data) - self._pos} left"
            )
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def header(self, expect_flavor: int | None = None) -> tuple[int, int]:
        """Validate the header and return ``(d, flavor)``."""
        magic = bytes(self._take(4))
        if magic != MAGIC:
            raise StoreFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, d, flavor = struct.unpack("<IIB", self._take(9))
        if version != VERSION:
            raise StoreFormatError(f"unsupported version {version} (reader is {VERSION})")
        if flavor not in FLAVOR_NAMES:
            raise StoreFormatError(f"unknown flavor tag {flavor}")
        if expect_flavor is not None and flavor != expect_flavor:
            raise StoreFormatError(
                f"flavor mismatch: file holds {FLAVOR_NAMES[flavor]!r} (tag {flavor}), "
                f"expected {FLAVOR_NAMES[expect_flavor]!r} (tag {expect_flavor})"
            )
        return d, flavor

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self._take(8))[0]

    def f32s(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(4 * count), dtype="<f4").astype(np.float32)

    def u64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * count), dtype="<u8").astype(np.int64)

    def i64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * count), dtype="<i8").astype(np.int64)

    def finish(self) -> None:
        if self._pos != len(self._data):
            raise StoreFormatError(f"{len(self._data) - self._pos} trailing bytes after body")


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write ``data`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
