"""Minimal binary PPM (P6) reader/writer for reconstruction dumps."""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def write_ppm(path, image: np.ndarray):
    """Write an H x W x 3 image; float inputs are treated as [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"write_ppm expects HxWx3, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise FormatError(f"not a P6 ppm: {magic!r}")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(f.readline())
        if maxval != 255:
            raise FormatError(f"unsupported maxval {maxval}")
        payload = f.read(w * h * 3)
    if len(payload) != w * h * 3:
        raise FormatError("ppm payload truncated")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
