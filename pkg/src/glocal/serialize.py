"""Binary tensor formats used for map dumps, datasets and checkpoints.

Single tensors use a flat little-endian layout: magic ``GMT1``, u32 rank,
u32 dims, then the float64 payload in C order.  Checkpoints and other
named-tensor bundles prepend a JSON index (name -> byte offset into the
blob section) so individual tensors can be located without parsing the
whole file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"GMT1"
BUNDLE_MAGIC = b"GMTB"


class FormatError(ValueError):
    """File does not follow the expected binary layout."""


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record; returns (array, offset past the record)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = start + 8 * count
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf[start:end], dtype="<f8").reshape(dims).astype(np.float64)
    return arr, end


def save_tensor(path, arr: np.ndarray):
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr


def save_bundle(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    """Write a named-tensor container: JSON index + concatenated records."""
    blobs = []
    offsets = {}
    pos = 0
    for name, arr in tensors.items():
        rec = tensor_bytes(arr)
        offsets[name] = pos
        blobs.append(rec)
        pos += len(rec)
    index = json.dumps({"meta": meta or {}, "tensors": offsets},
                       sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<Q", len(index)))
        fh.write(index)
        for rec in blobs:
            fh.write(rec)


def load_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != BUNDLE_MAGIC:
        raise FormatError("bad bundle magic")
    (index_len,) = struct.unpack_from("<Q", buf, 4)
    index = json.loads(buf[12:12 + index_len].decode("utf-8"))
    base = 12 + index_len
    tensors = {}
    for name, off in index["tensors"].items():
        tensors[name], _ = tensor_from_bytes(buf, base + off)
    return tensors, index.get("meta", {})
