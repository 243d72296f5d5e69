"""Procedurally generated training/calibration textures.

Deterministic given the seed; quality of the toy model only has to yield
monotone RD curves, so blocky structures with mild noise at the codec's
reconstruction scale are enough.
"""
from __future__ import annotations

import numpy as np


def texture_plane(rng: np.random.Generator, h: int, w: int, lo=30, hi=226, noise=6.0):
    """One 8-bit plane: random block mosaic, a smooth gradient, and noise."""
    block = int(rng.choice([4, 8, 16]))
    bh, bw = -(-h // block), -(-w // block)
    base = np.repeat(np.repeat(rng.integers(lo, hi, (bh, bw)), block, 0), block, 1)
    base = base[:h, :w].astype(np.float64)
    gy, gx = np.mgrid[0:h, 0:w]
    base += rng.uniform(-30, 30) * (gx / max(w - 1, 1) - 0.5)
    base += rng.uniform(-30, 30) * (gy / max(h - 1, 1) - 0.5)
    base += rng.normal(0, noise, (h, w))
    return np.clip(base, 0, 255).astype(np.uint8)


def yuv_crop(rng: np.random.Generator, size: int = 64):
    """(y, u, v) uint8 planes with half-resolution chroma."""
    y = texture_plane(rng, size, size)
    u = texture_plane(rng, size // 2, size // 2, 56, 200, 3.0)
    v = texture_plane(rng, size // 2, size // 2, 56, 200, 3.0)
    return y, u, v


def normalized_batch(rng: np.random.Generator, batch: int, size: int = 64):
    """Training batch in the codec's normalized domain (p-128)/64; returns
    (luma (B,1,h,w), chroma (B,2,h/2,w/2)) float32 arrays."""
    ys, uvs = [], []
    for _ in range(batch):
        y, u, v = yuv_crop(rng, size)
        ys.append((y.astype(np.float32) - 128.0) / 64.0)
        uvs.append(np.stack([u, v]).astype(np.float32) / 64.0 - 2.0)
    return np.stack(ys)[:, None], np.stack(uvs)


def write_y4m(path, y: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Single-frame YUV4MPEG2 writer (the codec's image interchange format)."""
    h, w = y.shape
    with open(path, "wb") as f:
        f.write(f"YUV4MPEG2 W{w} H{h} F25:1 Ip A1:1 C420jpeg\nFRAME\n".encode())
        f.write(y.tobytes())
        f.write(u.tobytes())
        f.write(v.tobytes())


def write_image_set(directory, seed: int, count: int, size: int = 64):
    """Deterministic .y4m image set (calibration / probe material)."""
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        y, u, v = yuv_crop(rng, size)
        p = directory / f"tex{i:03d}.y4m"
        write_y4m(p, y, u, v)
        paths.append(p)
    return paths
