"""Distortion and rate metrics: PSNR, combined YUV-PSNR, MS-SSIM,
Bjontegaard delta rate, the mixed BD-rate, and the encoder/decoder
cross-check error."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCurveError

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WIN = 11
MSSSIM_SIGMA = 1.5
_C1 = (0.01 * 255) ** 2
_C2 = (0.03 * 255) ** 2


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE); identical planes return the inf flag."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"plane dims differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def yuv_psnr(y_db: float, u_db: float, v_db: float) -> float:
    """Combined PSNR with weights 0.8 (Y), 0.1 (U), 0.1 (V); the infinite
    flag propagates."""
    if math.isinf(y_db) or math.isinf(u_db) or math.isinf(v_db):
        return math.inf
    return 0.8 * y_db + 0.1 * u_db + 0.1 * v_db


def _gauss_kernel(n: int = MSSSIM_WIN, sigma: float = MSSSIM_SIGMA) -> np.ndarray:
    x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1-D kernel."""
    n = len(k)
    h, w = img.shape
    out = np.zeros((h, w - n + 1), dtype=np.float64)
    for i, kv in enumerate(k):
        out += kv * img[:, i : i + w - n + 1]
    out2 = np.zeros((h - n + 1, out.shape[1]), dtype=np.float64)
    for i, kv in enumerate(k):
        out2 += kv * out[i : i + h - n + 1]
    return out2


def _ssim_maps(a: np.ndarray, b: np.ndarray, k: np.ndarray):
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    cs = (2.0 * cov + _C2) / (var_a + var_b + _C2)
    lum = (2.0 * mu_a * mu_b + _C1) / (mu_a * mu_a + mu_b * mu_b + _C1)
    return lum, cs


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    x = img[:h, :w]
    return (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2]) / 4.0


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale SSIM on one (luma) plane, 11x11 Gaussian window with
    sigma 1.5, standard five scale weights, C1=(0.01*255)^2, C2=(0.03*255)^2.

    Inputs smaller than 176 px on a side reduce the scale count (weights
    renormalized) with a warning.  Negative contrast terms are clamped at
    zero so fractional exponents stay real.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    min_dim = min(a.shape)
    levels = len(MSSSIM_WEIGHTS)
    while levels > 1 and (min_dim >> (levels - 1)) < MSSSIM_WIN:
        levels -= 1
    if levels < len(MSSSIM_WEIGHTS):
        warnings.warn(
            f"input {a.shape} too small for 5 scales; using {levels}",
            stacklevel=2,
        )
    weights = np.asarray(MSSSIM_WEIGHTS[:levels])
    if levels < len(MSSSIM_WEIGHTS):
        weights = weights / weights.sum()
    k = _gauss_kernel()
    score = 1.0
    for lvl in range(levels):
        lum, cs = _ssim_maps(a, b, k)
        if lvl < levels - 1:
            score *= max(float(cs.mean()), 0.0) ** weights[lvl]
            a = _downsample2(a)
            b = _downsample2(b)
        else:
            score *= max(float((lum * cs).mean()), 0.0) ** weights[lvl]
    return float(score)


@dataclass
class RDCurve:
    """(rate, quality) samples of one codec configuration, rate ascending."""

    points: list  # of (rate_bpp, quality)

    def __post_init__(self):
        self.points = [(float(r), float(q)) for r, q in self.points]

    def finite(self) -> "RDCurve":
        """Drop flagged-infinite quality points (identical reconstructions)."""
        return RDCurve([p for p in self.points if math.isfinite(p[1])])

    def validate(self):
        """Reject curves the Bjontegaard fit cannot treat as a function of
        quality: too few points, bad rates, duplicate qualities, or an
        inversion deeper than a quarter of the quality span (small local
        wobbles near saturation are normal and handled by the fit)."""
        rates = [r for r, _ in self.points]
        quals = [q for _, q in self.points]
        if len(self.points) < 4:
            raise DegenerateCurveError(f"need >= 4 points, have {len(self.points)}")
        if any(r <= 0 for r in rates):
            raise DegenerateCurveError("rates must be positive")
        if any(r2 <= r1 for r1, r2 in zip(rates, rates[1:])):
            raise DegenerateCurveError("rates must be strictly increasing")
        if len(set(quals)) != len(quals):
            raise DegenerateCurveError("quality values must be distinct")
        span = max(quals) - min(quals)
        depth = max(
            (quals[i] - min(quals[i + 1 :])) for i in range(len(quals) - 1)
        )
        if depth > 0.25 * span:
            raise DegenerateCurveError(
                "quality is not monotone in rate beyond fit tolerance"
            )


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Classic Bjontegaard delta rate in percent (positive = test worse).

    Cubic least-squares fit of log(rate) over quality for both curves,
    integrated over the common quality interval.
    """
    anchor = anchor.finite()
    test = test.finite()
    anchor.validate()
    test.validate()
    qa = np.asarray([q for _, q in anchor.points])
    qt = np.asarray([q for _, q in test.points])
    ra = np.log([r for r, _ in anchor.points])
    rt = np.log([r for r, _ in test.points])
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if hi <= lo:
        raise DegenerateCurveError("curves share no quality interval")
    shift = 0.5 * (lo + hi)  # center for fit conditioning
    pa = np.polyfit(qa - shift, ra, 3)
    pt = np.polyfit(qt - shift, rt, 3)
    ia = np.polyint(pa)
    it = np.polyint(pt)
    span = hi - lo
    avg_diff = (
        (np.polyval(it, hi - shift) - np.polyval(it, lo - shift))
        - (np.polyval(ia, hi - shift) - np.polyval(ia, lo - shift))
    ) / span
    return float((math.exp(avg_diff) - 1.0) * 100.0)


def mixed_bd_rate(bd_yuv_psnr: float, bd_msssim: float) -> float:
    """Mean of the two BD-rates (the mixed objective)."""
    return (bd_yuv_psnr + bd_msssim) / 2.0


def mse_enc_dec(enc_rec, dec_rec) -> float:
    """Sum over Y, U, V of the per-plane MSE between the encoder-side and
    decoder-side reconstructions."""
    total = 0.0
    for pa, pb in zip(enc_rec.planes(), dec_rec.planes()):
        if pa.shape != pb.shape:
            raise ValueError(f"plane dims differ: {pa.shape} vs {pb.shape}")
        total += float(np.mean((pa.astype(np.float64) - pb.astype(np.float64)) ** 2))
    return total


@dataclass
class QualityReport:
    """Per-image metric row (Table-style columns)."""

    name: str
    rate_bpp: float
    msssim: float
    y_psnr: float
    u_psnr: float
    v_psnr: float

    @property
    def yuv_psnr(self) -> float:
        return yuv_psnr(self.y_psnr, self.u_psnr, self.v_psnr)

    def row(self) -> dict:
        return {
            "image": self.name,
            "rate_bpp": self.rate_bpp,
            "ms_ssim": self.msssim,
            "y_psnr": self.y_psnr,
            "u_psnr": self.u_psnr,
            "v_psnr": self.v_psnr,
            "yuv_psnr": self.yuv_psnr,
        }
