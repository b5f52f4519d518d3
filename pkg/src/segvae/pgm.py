"""Grayscale PGM figures for spectrogram-shaped matrices.

Binary P5 with a fixed dB-to-gray mapping so figures from different runs are
directly comparable: lo_db maps to black, hi_db to white, values clamped.
Rows are frequency bins with the highest bin at the top, columns are frames.
"""

from __future__ import annotations

import numpy as np

DB_LO = -20.0
DB_HI = 80.0


def to_gray(values: np.ndarray, lo: float = DB_LO, hi: float = DB_HI) -> np.ndarray:
    """Map a (T, F) dB matrix to a (F, T) uint8 image, high frequencies on top."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-d (frames, bins) matrix")
    g = np.rint((x - lo) / (hi - lo) * 255.0)
    g = np.clip(g, 0, 255).astype(np.uint8)
    return g.T[::-1]


def write_pgm(path, values: np.ndarray, lo: float = DB_LO, hi: float = DB_HI) -> None:
    img = to_gray(values, lo, hi)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read back a P5 file written by write_pgm; returns the uint8 image."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError("not a binary PGM written by this package")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError("unsupported maxval")
    img = np.frombuffer(parts[3][: w * h], dtype=np.uint8)
    return img.reshape(h, w)
