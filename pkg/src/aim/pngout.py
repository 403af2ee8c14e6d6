"""Minimal PNG writer (8-bit RGB, zlib-compressed) with no image deps."""
from __future__ import annotations

import struct
import zlib

import numpy as np


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload)))


def write_png(path: str, image: np.ndarray):
    """image: (H, W, 3) float in [0, 1] or uint8."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = image.shape
    raw = b"".join(b"\x00" + image[r].tobytes() for r in range(h))
    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(_chunk(b"IHDR", header))
        fh.write(_chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(_chunk(b"IEND", b""))


def tile_grid(images, cols: int, pad: int = 2, scale: int = 4) -> np.ndarray:
    """Arrange same-sized RGB images into a padded grid, integer-upscaled."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    h, w, _ = images[0].shape
    rows = (len(images) + cols - 1) // cols
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 0.15)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y:y + h, x:x + w] = np.clip(im, 0.0, 1.0)
    return np.repeat(np.repeat(canvas, scale, axis=0), scale, axis=1)


def heatmap_rgb(values: np.ndarray) -> np.ndarray:
    """Grayscale-to-viridis-ish mapping for scalar panels."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 * v - 0.25, 0.0, 1.0)
    g = np.clip(1.5 * v, 0.0, 1.0) * 0.85
    b = np.clip(1.0 - v, 0.2, 1.0) * (0.4 + 0.6 * (1.0 - v))
    return np.stack([r, g, b], axis=-1)
