"""HDR image files (little-endian PFM) and tonemapped PNG previews."""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_pfm(path, image) -> None:
    """Write an (H, W, 3) or (H, W) float image as little-endian PFM.

    Rows are stored bottom-to-top as the format requires.
    """
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        header = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM needs an (H, W) or (H, W, 3) image")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        while not dims:
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def reinhard(image) -> np.ndarray:
    x = np.maximum(np.asarray(image, dtype=np.float64), 0.0)
    return x / (1.0 + x)


def srgb_encode(linear) -> np.ndarray:
    c = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)


def tonemap(image) -> np.ndarray:
    """Reinhard ``x / (1 + x)`` followed by the sRGB transfer curve, in [0, 1]."""
    return srgb_encode(reinhard(image))


def write_png(path, image) -> None:
    """Tonemap an HDR image and save an 8-bit PNG preview."""
    ldr = np.round(tonemap(image) * 255.0).astype(np.uint8)
    Image.fromarray(ldr).save(path)
