"""Shared binary checkpoint format, used by every trained model.

Layout: magic "TFM1", u32 blob count, then per blob: u32 name length,
UTF-8 name, u32 ndim, u32 dims, little-endian float64 data. Blobs are
written in sorted name order so checkpoints are byte-reproducible.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC_MODEL = b"TFM1"


def save_blobs(path, blobs: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC_MODEL)
        f.write(struct.pack("<I", len(blobs)))
        for name in sorted(blobs):
            arr = np.atleast_1d(np.asarray(blobs[name], dtype=np.float64))
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def load_blobs(path) -> dict:
    blobs = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC_MODEL:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            blobs[name] = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()
    return blobs


def scalar(blobs: dict, name: str) -> float:
    return float(np.asarray(blobs[name]).reshape(-1)[0])
