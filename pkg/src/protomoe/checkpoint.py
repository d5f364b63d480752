"""Binary named-tensor checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"NTC1"
    meta    u32 length + UTF-8 JSON (format version, step, config echo)
    count   u32
    per tensor:
        name   u16 length + UTF-8 bytes
        dtype  u8 (0=float32, 1=float64, 2=int64)
        ndim   u8
        dims   ndim * u32
        data   raw little-endian C-order bytes

Round-trips are bit-exact for every tensor.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTC1"

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files."""


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, order="C")  # keeps 0-d shapes, unlike ascontiguousarray
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            code = _DTYPE_CODES.get(le.dtype)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(le.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        tensors[name] = arr
    return tensors, meta
