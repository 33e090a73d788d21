"""``TCNT`` binary tensor files and checkpoint directories.

Layout: ``b"TCNT"``, version byte (1), rank byte, ``rank`` little-endian u32
dims, then little-endian float32 values in C order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"TCNT"
VERSION = 1
MANIFEST = "manifest.txt"


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise FormatError("rank must fit in one byte")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not a TCNT file")
    if len(buf) < 6:
        raise FormatError("truncated header")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported TCNT version {version}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * n:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", offset=off, count=n).reshape(dims).astype(np.float32)


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, arr: np.ndarray) -> None:
    atomic_write(path, encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_checkpoint(directory, params: dict[str, np.ndarray]) -> None:
    """One ``<name>.tcnt`` per parameter plus a manifest of names and shapes."""
    directory = Path(directory)
    lines = []
    for name in sorted(params):
        arr = params[name]
        write_tensor(directory / f"{name}.tcnt", arr)
        lines.append(" ".join([name] + [str(n) for n in arr.shape]))
    atomic_write(directory / MANIFEST, "\n".join(lines) + "\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    out = {}
    for line in (directory / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, *dims = line.split()
        arr = read_tensor(directory / f"{name}.tcnt")
        if arr.shape != tuple(int(d) for d in dims):
            raise FormatError(f"{name}: manifest shape {dims} != file shape {arr.shape}")
        out[name] = arr
    return out
