"""8-bit planar YUV (Y4M subset) and PPM image I/O.

RGB<->YUV conversion uses fixed-coefficient integer BT.601 with defined
rounding, so ingestion itself is deterministic across platforms.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass
class YuvImage:
    """4:2:0 planar image: full-resolution luma, half-resolution chroma."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.y = np.ascontiguousarray(self.y, dtype=np.uint8)
        self.u = np.ascontiguousarray(self.u, dtype=np.uint8)
        self.v = np.ascontiguousarray(self.v, dtype=np.uint8)
        h, w = self.y.shape
        if h % 2 or w % 2:
            raise ValueError(f"luma dims must be even, got {h}x{w}")
        if self.u.shape != (h // 2, w // 2) or self.v.shape != (h // 2, w // 2):
            raise ValueError("chroma planes must be half resolution")

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def height(self) -> int:
        return self.y.shape[0]

    def planes(self):
        return (self.y, self.u, self.v)

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.planes():
            h.update(p.tobytes())
        return h.hexdigest()


def read_y4m(path) -> YuvImage:
    """Single-frame YUV4MPEG2 reader (C420 family only)."""
    with open(path, "rb") as f:
        data = f.read()
    nl = data.index(b"\n")
    header = data[:nl].decode("ascii")
    fields = header.split(" ")
    if fields[0] != "YUV4MPEG2":
        raise ValueError(f"{path}: not a YUV4MPEG2 file")
    w = h = None
    for tok in fields[1:]:
        if tok.startswith("W"):
            w = int(tok[1:])
        elif tok.startswith("H"):
            h = int(tok[1:])
        elif tok.startswith("C") and not tok.startswith("C420"):
            raise ValueError(f"{path}: only 4:2:0 is supported, got {tok}")
    if w is None or h is None:
        raise ValueError(f"{path}: header missing dimensions")
    body = data[nl + 1 :]
    if not body.startswith(b"FRAME"):
        raise ValueError(f"{path}: missing FRAME marker")
    body = body[body.index(b"\n") + 1 :]
    ysz, csz = w * h, (w // 2) * (h // 2)
    if len(body) < ysz + 2 * csz:
        raise ValueError(f"{path}: truncated frame payload")
    y = np.frombuffer(body[:ysz], dtype=np.uint8).reshape(h, w)
    u = np.frombuffer(body[ysz : ysz + csz], dtype=np.uint8).reshape(h // 2, w // 2)
    v = np.frombuffer(body[ysz + csz : ysz + 2 * csz], dtype=np.uint8).reshape(h // 2, w // 2)
    return YuvImage(y, u, v)


def write_y4m(path, img: YuvImage):
    header = f"YUV4MPEG2 W{img.width} H{img.height} F25:1 Ip A1:1 C420jpeg\nFRAME\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for p in img.planes():
            f.write(p.tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 reader, maxval 255; returns (H, W, 3) uint8."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data[pos : pos + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3)


def write_ppm(path, rgb: np.ndarray):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def rgb_to_yuv420(rgb: np.ndarray) -> YuvImage:
    """Integer BT.601 (studio range) conversion with >>8 rounding, then
    2x2 chroma averaging with round-half-up."""
    rgb = np.asarray(rgb)
    h, w, _ = rgb.shape
    if h % 2 or w % 2:
        raise ValueError("image dims must be even for 4:2:0")
    r = rgb[:, :, 0].astype(np.int64)
    g = rgb[:, :, 1].astype(np.int64)
    b = rgb[:, :, 2].astype(np.int64)
    y = ((66 * r + 129 * g + 25 * b + 128) >> 8) + 16
    u = ((-38 * r - 74 * g + 112 * b + 128) >> 8) + 128
    v = ((112 * r - 94 * g - 18 * b + 128) >> 8) + 128
    u420 = (u[0::2, 0::2] + u[0::2, 1::2] + u[1::2, 0::2] + u[1::2, 1::2] + 2) >> 2
    v420 = (v[0::2, 0::2] + v[0::2, 1::2] + v[1::2, 0::2] + v[1::2, 1::2] + 2) >> 2
    clip = lambda p: np.clip(p, 0, 255).astype(np.uint8)
    return YuvImage(clip(y), clip(u420), clip(v420))


def yuv420_to_rgb(img: YuvImage) -> np.ndarray:
    """Inverse integer BT.601; chroma upsampled by pixel replication."""
    c = img.y.astype(np.int64) - 16
    d = np.repeat(np.repeat(img.u.astype(np.int64), 2, axis=0), 2, axis=1) - 128
    e = np.repeat(np.repeat(img.v.astype(np.int64), 2, axis=0), 2, axis=1) - 128
    r = (298 * c + 409 * e + 128) >> 8
    g = (298 * c - 100 * d - 208 * e + 128) >> 8
    b = (298 * c + 516 * d + 128) >> 8
    out = np.stack([r, g, b], axis=-1)
    return np.clip(out, 0, 255).astype(np.uint8)


def load_image(path) -> YuvImage:
    """Read .y4m directly or .ppm via BT.601 conversion."""
    p = str(path)
    if p.endswith(".y4m"):
        return read_y4m(path)
    if p.endswith(".ppm"):
        return rgb_to_yuv420(read_ppm(path))
    raise ValueError(f"unsupported image format: {p}")


def pad_to_multiple(img: YuvImage, multiple: int) -> YuvImage:
    """Replicate-edge pad the luma dims up to `multiple` (chroma to half)."""
    h, w = img.y.shape
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph == 0 and pw == 0:
        return img
    y = np.pad(img.y, ((0, ph), (0, pw)), mode="edge")
    u = np.pad(img.u, ((0, ph // 2), (0, pw // 2)), mode="edge")
    v = np.pad(img.v, ((0, ph // 2), (0, pw // 2)), mode="edge")
    return YuvImage(y, u, v)


def crop(img: YuvImage, width: int, height: int) -> YuvImage:
    return YuvImage(
        img.y[:height, :width],
        img.u[: height // 2, : width // 2],
        img.v[: height // 2, : width // 2],
    )
