"""Entropy model machinery: frozen cumulative-frequency tables and a
32-bit renormalizing range coder.

Tables are built once at model packaging time (float Gaussian integrals are
allowed there) and stored verbatim in the model file; encoders and decoders
only ever execute exact integer arithmetic against the stored bytes, so
identical table bytes imply identical decode on any platform.
"""
from __future__ import annotations

import hashlib
import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .errors import BitstreamError

SYMBOL_BOUND = 255  # symbols cover [-255, 255]
NUM_SYMBOLS = 2 * SYMBOL_BOUND + 1
TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS

NUM_BINS = 64
SIGMA_MIN = 0.05
SIGMA_MAX = 32.0
Z_SIGMA = 80.0  # wide, near-uniform prior for the hyper latent

_TOP = 1 << 24
_BOT = 1 << 16
_MASK = 0xFFFFFFFF


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def gaussian_freqs(sigma: float, total: int = TOTAL) -> np.ndarray:
    """Integer symbol frequencies for a zero-mean Gaussian of scale `sigma`.

    Each symbol s gets the probability mass of (s-0.5, s+0.5], normalized
    over the clipped symbol range (so the sigma -> inf limit is uniform).
    Every symbol keeps frequency >= 1 and the total is exactly `total`, so
    the CDF is strictly increasing with a 16-bit total.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    probs = np.empty(NUM_SYMBOLS, dtype=np.float64)
    for i, s in enumerate(range(-SYMBOL_BOUND, SYMBOL_BOUND + 1)):
        probs[i] = max(_phi((s + 0.5) / sigma) - _phi((s - 0.5) / sigma), 0.0)
    budget = total - NUM_SYMBOLS
    raw = probs * (budget / probs.sum())
    base = np.floor(raw).astype(np.int64)
    short = budget - int(base.sum())
    # Deterministic remainder distribution: largest fractional part first,
    # index as tie-break.
    order = np.lexsort((np.arange(NUM_SYMBOLS), -(raw - base)))
    base[order[:short]] += 1
    return base + 1


def freqs_to_cdf(freqs: np.ndarray) -> np.ndarray:
    cdf = np.zeros(len(freqs) + 1, dtype=np.int64)
    np.cumsum(freqs, out=cdf[1:])
    return cdf


@dataclass
class EntropyTables:
    """The model's frozen coding tables: 64 log-spaced scale bins for the
    latent residuals plus one fixed table for the hyper latent."""

    sigmas: np.ndarray  # (NUM_BINS,) bin centers
    edges: np.ndarray  # (NUM_BINS - 1,) float bin edges
    r_cdfs: np.ndarray  # (NUM_BINS, NUM_SYMBOLS + 1) int64
    z_cdf: np.ndarray  # (NUM_SYMBOLS + 1,) int64

    def __post_init__(self):
        self._cdf_lists = None

    @property
    def r_freqs(self) -> np.ndarray:
        return np.diff(self.r_cdfs, axis=1)

    @property
    def z_freqs(self) -> np.ndarray:
        return np.diff(self.z_cdf)

    def cdf_list(self, bin_idx: int) -> list:
        # Python lists make the per-symbol coder loop markedly faster.
        if self._cdf_lists is None:
            self._cdf_lists = [row.tolist() for row in self.r_cdfs]
        return self._cdf_lists[bin_idx]

    def edges_int(self, scale_exp: int) -> np.ndarray:
        """Bin edges in the fixed-point scale of the sigma tensor, rounded
        half away from zero; bin lookup is then pure integer comparison."""
        v = self.edges * float(1 << scale_exp)
        return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)

    def bins_for_sigma_int(self, sigma_int: np.ndarray, scale_exp: int) -> np.ndarray:
        return np.searchsorted(self.edges_int(scale_exp), sigma_int, side="right")

    def to_bytes(self) -> bytes:
        stack = np.concatenate([self.r_cdfs.reshape(-1), self.z_cdf])
        return stack.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes, sigmas: np.ndarray, edges: np.ndarray) -> "EntropyTables":
        arr = np.frombuffer(payload, dtype="<u4").astype(np.int64)
        want = (NUM_BINS + 1) * (NUM_SYMBOLS + 1)
        if arr.size != want:
            raise ValueError(f"table payload has {arr.size} entries, expected {want}")
        r = arr[: NUM_BINS * (NUM_SYMBOLS + 1)].reshape(NUM_BINS, NUM_SYMBOLS + 1)
        z = arr[NUM_BINS * (NUM_SYMBOLS + 1) :]
        return cls(sigmas=sigmas, edges=edges, r_cdfs=r, z_cdf=z)

    def digest(self) -> str:
        return "sha256:" + hashlib.sha256(self.to_bytes()).hexdigest()

    def validate(self):
        for cdf in list(self.r_cdfs) + [self.z_cdf]:
            if cdf[0] != 0 or cdf[-1] != TOTAL:
                raise ValueError("CDF endpoints must be 0 and 2**16")
            if (np.diff(cdf) < 1).any():
                raise ValueError("CDF must be strictly increasing")


def sigma_bin_centers(num_bins: int = NUM_BINS) -> np.ndarray:
    return np.exp(np.linspace(math.log(SIGMA_MIN), math.log(SIGMA_MAX), num_bins))


def build_entropy_tables() -> EntropyTables:
    """Package-time table construction (the only float Gaussian math in the
    coding path; its output is stored verbatim in the model)."""
    sigmas = sigma_bin_centers()
    edges = np.sqrt(sigmas[:-1] * sigmas[1:])  # geometric midpoints
    r_cdfs = np.stack([freqs_to_cdf(gaussian_freqs(s)) for s in sigmas])
    z_cdf = freqs_to_cdf(gaussian_freqs(Z_SIGMA))
    tables = EntropyTables(sigmas=sigmas, edges=edges, r_cdfs=r_cdfs, z_cdf=z_cdf)
    tables.validate()
    return tables


class RangeEncoder:
    """Carry-less byte-oriented range coder (32-bit state, 16-bit totals)."""

    def __init__(self):
        self.low = 0
        self.rng = _MASK
        self.out = bytearray()

    def encode(self, cdf: list, symbol: int):
        lo = cdf[symbol]
        hi = cdf[symbol + 1]
        r = self.rng >> TOTAL_BITS
        self.low += r * lo
        self.rng = r * (hi - lo)
        low, rng, out = self.low, self.rng, self.out
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
            rng = (rng << 8)
        self.low, self.rng = low, rng

    def finish(self) -> bytes:
        low = self.low
        for _ in range(4):
            self.out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    """Mirror of RangeEncoder; raises BitstreamError on truncation/desync."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.rng = _MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise BitstreamError("range coder ran out of payload bytes")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cdf: list) -> int:
        r = self.rng >> TOTAL_BITS
        dv = (self.code - self.low) // r
        if dv >= TOTAL:
            raise BitstreamError("range coder desynchronized (corrupt payload)")
        symbol = bisect_right(cdf, dv) - 1
        lo = cdf[symbol]
        hi = cdf[symbol + 1]
        self.low += r * lo
        self.rng = r * (hi - lo)
        low, rng, code = self.low, self.rng, self.code
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            code = ((code << 8) | self._byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8)
        self.low, self.rng, self.code = low, rng, code
        return symbol


def range_encode(symbols, cdfs) -> bytes:
    """Encode symbols (already offset to table indices) against per-symbol
    CDF lists; `cdfs` is either one CDF or a sequence matching symbols."""
    enc = RangeEncoder()
    if isinstance(cdfs, list) and cdfs and isinstance(cdfs[0], int):
        table = cdfs
        for s in symbols:
            enc.encode(table, s)
    else:
        for s, table in zip(symbols, cdfs):
            enc.encode(table, s)
    return enc.finish()


def range_decode(data: bytes, cdfs, count: int | None = None) -> list:
    """Decode `count` symbols (or one per entry of `cdfs`)."""
    dec = RangeDecoder(data)
    if isinstance(cdfs, list) and cdfs and isinstance(cdfs[0], int):
        if count is None:
            raise ValueError("count required with a single table")
        return [dec.decode(cdfs) for _ in range(count)]
    return [dec.decode(table) for table in cdfs]


def estimate_rate_bits(freqs: np.ndarray) -> float:
    """Ideal code length sum(-log2 p) in bits for the given per-symbol
    frequencies (16-bit total)."""
    f = np.asarray(freqs, dtype=np.float64)
    if (f < 1).any():
        raise ValueError("zero-frequency symbol")
    return float(np.sum(TOTAL_BITS - np.log2(f)))
