"""PFM (32-bit float, little-endian) and 8-bit PNG image files."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, image) -> None:
    """Write a 2-D (grayscale ``Pf``) or ``H x W x 3`` (``PF``) float image.

    Rows are stored bottom-to-top as the format requires; the negative scale
    marks little-endian data.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds H x W or H x W x 3 images, got shape {img.shape}")
    h, w = img.shape[:2]
    data = np.flipud(img).astype("<f4")
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end():]
    if len(body) < 4 * count:
        raise ValueError(f"{path}: truncated PFM payload")
    data = np.frombuffer(body, dtype, count).astype(np.float64)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).copy()


def to_uint8(image) -> np.ndarray:
    return (np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, image) -> None:
    """Write an image in [0, 1] (H x W or H x W x 3) as 8-bit PNG."""
    Image.fromarray(to_uint8(image)).save(path)


def write_mask_png(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def read_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    bad = (arr != 0) & (arr != 255)
    if np.any(bad):
        raise ValueError(f"{path}: mask is not binary ({int(bad.sum())} pixels outside {{0, 255}})")
    return arr == 255


def read_image(path) -> np.ndarray:
    """Float RGB image from a PFM file or an 8-bit PNG (scaled to [0, 1])."""
    if str(path).lower().endswith(".pfm"):
        return read_pfm(path)
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
