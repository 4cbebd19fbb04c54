"""Flat binary container for named float64 arrays.

Record layout, little-endian:
    uint32 name_length | name bytes (utf-8) | uint32 rank |
    rank * uint64 extents | float64 payload (row-major)

A plain-text manifest ``<path>.manifest.txt`` lists names and shapes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TDF1"


def save_arrays(path, arrays: dict[str, np.ndarray]):
    path = Path(path)
    lines = []
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.tobytes(order="C"))
            lines.append(f"{name} {'x'.join(str(s) for s in arr.shape) or 'scalar'}")
    manifest = path.with_name(path.name + ".manifest.txt")
    manifest.write_text("\n".join(lines) + "\n")


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path} is not a tridiff array file")
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
            count = 1
            for s in shape:
                count *= s
            payload = f.read(count * 8)
            if len(payload) != count * 8:
                raise ValueError(f"truncated record for {name}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out
