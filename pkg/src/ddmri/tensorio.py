"""File formats: the DDUT tensor container, PGM previews, checkpoints.

DDUT layout (all little-endian):
    magic "DDUT" | version u8 = 1 | dtype u8 (0 = f32, 1 = f64) | ndim u8 |
    reserved u8 = 0 | shape as ndim x u32 | payload row-major.

A checkpoint is one file of concatenated DDUT records (ParamStore order) plus
a JSON sidecar mapping parameter names to byte offsets.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .engine import ParamStore

MAGIC = b"DDUT"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorIOError(IOError):
    """Malformed or truncated tensor file."""


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise TensorIOError(f"unsupported dtype {arr.dtype}, expected float32 or float64")
    if arr.ndim > 255:
        raise TensorIOError("too many dimensions")
    header = MAGIC + struct.pack("<BBBB", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return header + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record starting at ``offset``; returns (array, next offset)."""
    if len(buf) - offset < 8:
        raise TensorIOError("truncated header")
    if buf[offset : offset + 4] != MAGIC:
        raise TensorIOError(f"bad magic {buf[offset:offset + 4]!r}")
    version, dtype_code, ndim, reserved = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != VERSION:
        raise TensorIOError(f"unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise TensorIOError(f"unknown dtype code {dtype_code}")
    if reserved != 0:
        raise TensorIOError("nonzero reserved byte")
    pos = offset + 8
    if len(buf) - pos < 4 * ndim:
        raise TensorIOError("truncated shape")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _CODE_DTYPES[dtype_code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = count * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise TensorIOError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("=")), pos + nbytes


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise TensorIOError(f"{len(buf) - end} trailing bytes after tensor record")
    return arr


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM of a 2-D image, clipped to [0,1] and scaled to [0,255]."""
    if image.ndim != 2:
        raise TensorIOError(f"PGM export needs a 2-D image, got shape {image.shape}")
    h, w = image.shape
    scaled = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(scaled.tobytes(order="C"))


def save_checkpoint(bin_path, index_path, store: ParamStore, meta: dict | None = None) -> None:
    records = []
    offset = 0
    chunks = []
    for name, tensor in store.items():
        chunk = tensor_bytes(tensor.data)
        records.append({"name": name, "offset": offset, "nbytes": len(chunk)})
        chunks.append(chunk)
        offset += len(chunk)
    Path(bin_path).write_bytes(b"".join(chunks))
    index = {
        "format": "ddmri-checkpoint",
        "version": 1,
        "dtype": str(np.dtype(store.dtype)),
        "params": records,
        "meta": meta or {},
    }
    Path(index_path).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_checkpoint(bin_path, index_path) -> tuple[dict[str, np.ndarray], dict]:
    index = json.loads(Path(index_path).read_text())
    if index.get("format") != "ddmri-checkpoint":
        raise TensorIOError("not a checkpoint index")
    buf = Path(bin_path).read_bytes()
    values: dict[str, np.ndarray] = {}
    for rec in index["params"]:
        arr, end = tensor_from_bytes(buf, rec["offset"])
        if end - rec["offset"] != rec["nbytes"]:
            raise TensorIOError(f"record size mismatch for {rec['name']!r}")
        values[rec["name"]] = arr
    return values, index.get("meta", {})
