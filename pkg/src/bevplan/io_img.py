"""Minimal portable greymap/pixmap (PGM P5 / PPM P6) writers for debug dumps."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] float or uint8 image as binary PGM."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (H, W, 3) [0, 1] float or uint8 image as binary PPM."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise ValueError("PPM needs 3 channels")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())
