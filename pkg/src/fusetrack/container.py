"""Binary array container used for dataset blobs and model checkpoints.

Layout (all integers little-endian):

    magic  b"AVHT"
    u32    format version
    u32    array count
    per array:
        u32    name length (bytes)
        name   utf-8
        u32    dtype code (see DTYPE_CODES)
        u32    rank
        u32[]  dims
        pad    to 8-byte boundary
        raw    array data, C order, little-endian
        pad    to 8-byte boundary

Array payloads start on 8-byte boundaries so a reader can mmap the file
and view arrays in place.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVHT"
FORMAT_VERSION = 1

# dtype code -> numpy dtype (little-endian on disk)
DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
}


class ContainerError(Exception):
    """Malformed or unsupported container file."""


def _dtype_code(arr: np.ndarray) -> int:
    for code, dt in DTYPE_CODES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return code
    raise ContainerError(f"unsupported dtype {arr.dtype!r}; supported: "
                         f"{[str(d) for d in DTYPE_CODES.values()]}")


def _pad_to(f, boundary: int = 8) -> None:
    pos = f.tell()
    rem = pos % boundary
    if rem:
        f.write(b"\x00" * (boundary - rem))


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path``. Keys are stored in insertion order."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            code = _dtype_code(arr)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<II", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            _pad_to(f)
            f.write(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
            _pad_to(f)


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    """Read all arrays from a container file into native-endian ndarrays."""
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    off = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            code, rank = struct.unpack_from("<II", raw, off)
            off += 8
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            off += (-off) % 8
            if code not in DTYPE_CODES:
                raise ContainerError(f"{path}: unknown dtype code {code} for {name!r}")
            dt = DTYPE_CODES[code]
            n_elems = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = n_elems * dt.itemsize
            if off + nbytes > len(raw):
                raise ContainerError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(raw, dtype=dt, count=n_elems, offset=off).reshape(dims)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
            off += nbytes
            off += (-off) % 8
    except (struct.error, UnicodeDecodeError) as e:
        raise ContainerError(f"{path}: truncated or corrupt header: {e}") from e
    return out


def write_text_block(arrays: dict[str, np.ndarray], name: str, text: str) -> None:
    """Store a utf-8 text blob (e.g. metadata JSON) as a u8 array entry."""
    arrays[name] = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def read_text_block(arrays: dict[str, np.ndarray], name: str) -> str:
    return arrays[name].tobytes().decode("utf-8")
