"""Minimal image I/O: 8-bit RGB PNG and grayscale PFM.

Both writers are byte-deterministic (fixed zlib level, fixed filter
strategy), which the dataset/CLI reproducibility contract relies on.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def write_png(path, image: np.ndarray):
    """Write (3, H, W) float in [0,1] or (H, W, 3) uint8 as 8-bit RGB PNG."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.dtype != np.uint8:
        img = np.clip(img, 0.0, 1.0)
        img = np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("expected (3,H,W) float or (H,W,3) uint8 image")
    h, w, _ = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    data = (_PNG_SIG + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(raw, 6))
            + _chunk(b"IEND", b""))
    Path(path).write_bytes(data)


def _unfilter(raw: bytes, h: int, w: int, channels: int) -> np.ndarray:
    stride = w * channels
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for r in range(h):
        ftype = raw[pos]
        pos += 1
        line = np.frombuffer(raw[pos:pos + stride], dtype=np.uint8).astype(np.int32)
        pos += stride
        prev = out[r - 1].astype(np.int32) if r > 0 else np.zeros(stride, np.int32)
        cur = np.zeros(stride, dtype=np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            for i in range(stride):
                a = cur[i - channels] if i >= channels else 0
                b = prev[i]
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + b) // 2
                else:
                    c = prev[i - channels] if i >= channels else 0
                    p = a + b - c
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                    pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                cur[i] = (line[i] + pred) & 0xFF
        else:
            raise ValueError(f"unsupported PNG filter {ftype}")
        out[r] = cur.astype(np.uint8)
    return out.reshape(h, w, channels)


def read_png_u8(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into (3, H, W) uint8."""
    img = read_png(path)
    return np.round(img * 255.0).astype(np.uint8)


def read_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into (3, H, W) float64 in [0,1]."""
    data = Path(path).read_bytes()
    if data[:8] != _PNG_SIG:
        raise ValueError(f"{path} is not a PNG file")
    pos = 8
    idat = b""
    w = h = None
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            w, h, depth, ctype, _, _, interlace = struct.unpack(">IIBBBBB", payload)
            if depth != 8 or ctype != 2 or interlace != 0:
                raise ValueError("only 8-bit non-interlaced RGB PNGs supported")
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    img = _unfilter(zlib.decompress(idat), h, w, 3)
    return img.astype(np.float64).transpose(2, 0, 1) / 255.0


def write_pfm(path, depth: np.ndarray):
    """Write (H, W) or (1, H, W) float as little-endian grayscale PFM."""
    d = np.asarray(depth, dtype=np.float32)
    if d.ndim == 3:
        d = d[0]
    h, w = d.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + d[::-1].tobytes())  # bottom-up rows


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"Pf":
        raise ValueError(f"{path} is not a grayscale PFM file")
    w, h = (int(x) for x in parts[1].split())
    scale = float(parts[2])
    raw = np.frombuffer(parts[3], dtype="<f4" if scale < 0 else ">f4",
                        count=h * w)
    return raw.reshape(h, w)[::-1].astype(np.float64)
