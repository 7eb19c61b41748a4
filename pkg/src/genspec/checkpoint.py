"""Named-tensor checkpoint container.

Layout: magic "GMZW", version u32, count u32, then per tensor
{name length u16, utf-8 name, rank u32, extents u32[rank], payload
little-endian f64}. All integers little-endian. Rejections carry the byte
offset where validation failed.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"GMZW"
VERSION = 1


def save_weights(path: str, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        nbytes = name.encode("utf-8")
        if len(nbytes) > 0xFFFF:
            raise FormatError(f"tensor name too long ({len(nbytes)} bytes): {name[:40]!r}...")
        chunks.append(struct.pack("<H", len(nbytes)))
        chunks.append(nbytes)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_weights(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r} at byte offset 0 in {path}")
    if len(blob) < 12:
        raise FormatError(f"checkpoint header truncated at byte offset {len(blob)} in {path}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte offset 4 in {path}")
    out: dict[str, np.ndarray] = {}
    pos = 12
    for _ in range(count):
        if pos + 2 > len(blob):
            raise FormatError(f"checkpoint truncated in name length at byte offset {pos} in {path}")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + nlen > len(blob):
            raise FormatError(f"checkpoint truncated in name at byte offset {pos} in {path}")
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        if pos + 4 > len(blob):
            raise FormatError(f"checkpoint truncated in rank at byte offset {pos} in {path}")
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank} at byte offset {pos - 4} in {path}")
        if pos + 4 * rank > len(blob):
            raise FormatError(f"checkpoint truncated in extents at byte offset {pos} in {path}")
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if pos + 8 * n > len(blob):
            raise FormatError(f"checkpoint truncated in payload at byte offset {pos} in {path}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise FormatError(f"trailing bytes after last tensor at byte offset {pos} in {path}")
    return out
