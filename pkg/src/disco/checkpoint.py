"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic    8 bytes  b"DISCOCKP"
    version  u32
    digest   u64      canonical config digest of the producing run
    count    u32      number of records
    records  count *  [name_len u32][name utf-8][dtype u8][ndim u8]
                      [dims u64 * ndim][payload raw LE bytes]
    trailer  u64      blake2b-8 of everything above

Records are written sorted by name, so equal contents give equal files.
Arrays are restored with their exact dtype; scalars travel as 0-d arrays.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "DigestMismatch", "save_checkpoint",
           "load_checkpoint", "peek_digest"]

MAGIC = b"DISCOCKP"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i4"): 4,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or wrong-version checkpoint."""


class DigestMismatch(CheckpointError):
    """Checkpoint was produced under a different configuration."""


def _canon(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, order="C")  # ascontiguousarray would upcast 0-d
    le = arr.dtype.newbyteorder("<")
    if le not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported checkpoint dtype {arr.dtype}")
    return arr.astype(le, copy=False)


def save_checkpoint(path, records: dict[str, np.ndarray],
                    config_digest: int) -> None:
    """Write records atomically (tmp file + rename)."""
    path = Path(path)
    blobs = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<Q", config_digest & (2**64 - 1)),
             struct.pack("<I", len(records))]
    for name in sorted(records):
        arr = _canon(np.asarray(records[name]))
        nb = name.encode("utf-8")
        blobs.append(struct.pack("<I", len(nb)))
        blobs.append(nb)
        blobs.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        blobs.append(arr.tobytes())
    body = b"".join(blobs)
    trailer = hashlib.blake2b(body, digest_size=8).digest()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + trailer)
    tmp.replace(path)


def peek_digest(path) -> int:
    """Read only the embedded config digest."""
    with open(path, "rb") as f:
        head = f.read(20)
    if len(head) < 20 or head[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    return struct.unpack_from("<Q", head, 12)[0]


def load_checkpoint(path, expect_digest: int | None = None
                    ) -> tuple[dict[str, np.ndarray], int]:
    """Read all records; verifies magic, version, trailer, and optionally
    the embedded config digest."""
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, trailer = raw[:-8], raw[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != trailer:
        raise CheckpointError(f"{path}: trailer hash mismatch (corrupt file)")
    version, = struct.unpack_from("<I", body, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version} not supported")
    digest, = struct.unpack_from("<Q", body, 12)
    if expect_digest is not None and digest != (expect_digest & (2**64 - 1)):
        raise DigestMismatch(
            f"{path}: checkpoint digest {digest:#018x} does not match expected "
            f"{expect_digest & (2**64 - 1):#018x}")
    count, = struct.unpack_from("<I", body, 20)
    off = 24
    records: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            name_len, = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            tag, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            dtype = _TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            payload = body[off:off + nbytes]
            if len(payload) != nbytes:
                raise CheckpointError(f"{path}: truncated record {name!r}")
            off += nbytes
            records[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    except (struct.error, KeyError) as e:
        raise CheckpointError(f"{path}: malformed record table") from e
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes")
    return records, digest
