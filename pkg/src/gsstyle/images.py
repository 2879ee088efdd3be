"""8-bit PNG image I/O.

Decoding goes through Pillow (handles every filter/interlace combination);
encoding uses a small stdlib writer with fixed zlib settings so output bytes
are deterministic — job requests, golden renders, and depth exports must be
byte-stable across reruns.

Decode maps byte b -> b/255; encode maps v -> round-half-up(clamp(v,0,1)*255).
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import ImageBuffer


class UnsupportedImageError(ValueError):
    pass


def read_image(path) -> ImageBuffer:
    """Read an 8-bit PNG (grayscale or color) into a float image in [0, 1]."""
    path = Path(path)
    with Image.open(path) as img:
        if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
            raise UnsupportedImageError(f"{path}: unsupported bit depth (mode {img.mode})")
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.uint8)[:, :, None]
        elif img.mode == "RGB":
            arr = np.asarray(img, dtype=np.uint8)
        elif img.mode in ("P", "RGBA", "LA", "1"):
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        else:
            raise UnsupportedImageError(f"{path}: unsupported mode {img.mode}")
    return ImageBuffer(arr.astype(np.float64) / 255.0)


def quantize(image: ImageBuffer) -> np.ndarray:
    """Float [0,1] -> uint8 with round-half-up (0.5 -> 128)."""
    v = np.clip(image.data, 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def encode_png(image: ImageBuffer) -> bytes:
    """Encode to PNG bytes: 8-bit gray or RGB, filter 0, zlib level 6."""
    arr = quantize(image)
    return _encode_png_bytes(arr, bit_depth=8)


def _encode_png_bytes(arr: np.ndarray, bit_depth: int) -> bytes:
    h, w, c = arr.shape
    color_type = 0 if c == 1 else 2
    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, color_type, 0, 0, 0)
    if bit_depth == 16:
        raw = arr.astype(">u2").tobytes()
    else:
        raw = arr.astype(np.uint8).tobytes()
    bytes_per_row = w * c * (bit_depth // 8)
    rows = bytearray()
    for r in range(h):
        rows.append(0)  # filter type 0 per scanline
        rows += raw[r * bytes_per_row:(r + 1) * bytes_per_row]
    idat = zlib.compress(bytes(rows), 6)
    return b"".join([
        b"\x89PNG\r\n\x1a\n",
        _png_chunk(b"IHDR", ihdr),
        _png_chunk(b"IDAT", idat),
        _png_chunk(b"IEND", b""),
    ])


def write_image(image: ImageBuffer, path) -> None:
    """Write an 8-bit PNG with deterministic bytes."""
    Path(path).write_bytes(encode_png(image))


def write_depth_png(depth: np.ndarray, path, scale: float | None = None) -> float:
    """Write a depth map as 16-bit grayscale PNG, value = depth/scale * 65535.

    Returns the scale actually used (max depth when not given) so callers can
    record it alongside the file.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[:, :, 0]
    if scale is None:
        scale = float(depth.max()) if depth.size and depth.max() > 0 else 1.0
    q = np.floor(np.clip(depth / scale, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)
    Path(path).write_bytes(_encode_png_bytes(q[:, :, None], bit_depth=16))
    return scale
