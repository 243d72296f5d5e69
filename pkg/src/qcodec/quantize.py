"""Post-training quantization of decoder layers.

Per-output-channel weight exponents are chosen so the 32-bit accumulator
cannot overflow for any admissible input; biases are quantized to 32 bits
at the combined scale.  8-bit weights additionally search the exponent in
[0, k_max] for minimal weight error, since clipping to [-128, 127] makes
the maximal exponent suboptimal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import CertificateError, InfeasibleChannelError
from .tensor import ACC_LIMIT, ActSpec, ConvGeometry, FloatConvLayer, QConvLayer

K_CAP = 20  # exponent scan ceiling; any feasible row saturates here

SUBNET_STEP_ORDER = ("h_sigma", "h_mu", "g_s")

DEFAULT_CLIP_GRID = (32767, 16383, 8191, 4095)


def default_activation_grid(fixed_clip: bool = False) -> tuple[ActSpec, ...]:
    """Full search grid: a in [0, 15] crossed with four power-of-two clip
    bounds (only the maximal bound when fixed_clip is set)."""
    clips = (32767,) if fixed_clip else DEFAULT_CLIP_GRID
    return tuple(ActSpec(a, q) for a in range(16) for q in clips)


@dataclass(frozen=True)
class QuantConfig:
    """Quantizer settings for the three-step decoder pipeline."""

    weight_bits: dict = field(
        default_factory=lambda: {"h_sigma": 8, "h_mu": 16, "g_s": 16}
    )
    acc_bits: int = 32
    grid: tuple = ()
    fixed_clip_mode: bool = False
    steps: tuple = SUBNET_STEP_ORDER
    k_cap: int = K_CAP

    def __post_init__(self):
        if self.acc_bits != 32:
            raise ValueError("accumulator is fixed at 32 bits")
        if self.weight_bits.get("h_sigma", 8) != 8:
            raise ValueError("h_sigma weights are quantized to 8 bits only")
        for name in ("h_mu", "g_s"):
            if self.weight_bits.get(name) not in (8, 16):
                raise ValueError(f"{name} weight bits must be 8 or 16")
        if tuple(self.steps) != SUBNET_STEP_ORDER[: len(self.steps)] or not self.steps:
            raise ValueError(
                f"steps must be a non-empty prefix of {SUBNET_STEP_ORDER}"
            )
        if not self.grid:
            object.__setattr__(
                self, "grid", default_activation_grid(self.fixed_clip_mode)
            )
        if self.fixed_clip_mode and any(s.clip_bound != 32767 for s in self.grid):
            raise ValueError("fixed_clip_mode pins the clip bound to 2**15-1")


@dataclass
class ChannelQuantResult:
    """One output channel's quantization outcome."""

    k: int
    q_weights: np.ndarray
    q_bias: int
    clip_error: float  # squared weight error (8-bit search diagnostics)

    def __post_init__(self):
        self.q_weights = np.ascontiguousarray(self.q_weights, dtype=np.int64)


def round_half_away(v: float) -> int:
    return int(math.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


def _quantize_row(w_row: np.ndarray, k: int) -> np.ndarray:
    v = w_row.astype(np.float64) * float(2**k)
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def _acc_bound_ok(q_w: np.ndarray, q_bias: int, clip_bound: int, acc_limit: int) -> bool:
    worst = int(np.abs(q_w).sum()) * clip_bound + abs(q_bias)
    return worst <= acc_limit


def max_safe_exponent(
    w_row: np.ndarray,
    bias: float,
    in_spec: ActSpec,
    weight_bits: int,
    acc_bits: int = 32,
    k_cap: int = K_CAP,
) -> int:
    """Largest k such that the quantized row cannot overflow the accumulator
    (and, for 16-bit weights, stays representable).

    Scanned exhaustively over [0, k_cap] with exact integer arithmetic.
    Raises InfeasibleChannelError when even k = 0 violates the bound.
    """
    w_row = np.asarray(w_row, dtype=np.float64).reshape(-1)
    if w_row.size == 0:
        raise ValueError("empty weight row")
    acc_limit = (1 << (acc_bits - 1)) - 1
    wmax = (1 << (weight_bits - 1)) - 1
    best = None
    for k in range(k_cap + 1):
        q_w = _quantize_row(w_row, k)
        q_b = round_half_away(bias * 2 ** (k + in_spec.scale_exp))
        if abs(q_b) > acc_limit:
            continue
        if not _acc_bound_ok(q_w, q_b, in_spec.clip_bound, acc_limit):
            continue
        if weight_bits == 16 and np.abs(q_w).max(initial=0) > wmax:
            continue
        best = k
    if best is None:
        raise InfeasibleChannelError(
            "no weight exponent satisfies the accumulator bound at this input spec"
        )
    return best


def quantize_channel_16(
    w_row: np.ndarray, bias: float, in_spec: ActSpec, k_cap: int = K_CAP
) -> ChannelQuantResult:
    """16-bit weights: scale directly by the maximal safe exponent."""
    k = max_safe_exponent(w_row, bias, in_spec, weight_bits=16, k_cap=k_cap)
    q_w = _quantize_row(np.asarray(w_row, dtype=np.float64).reshape(-1), k)
    q_b = round_half_away(bias * 2 ** (k + in_spec.scale_exp))
    return ChannelQuantResult(k=k, q_weights=q_w, q_bias=q_b, clip_error=0.0)


def _clip_error_exact(w_row: np.ndarray, q_w: np.ndarray, k: int) -> Fraction:
    """Exact squared quantization error of a clipped integer row.

    Floats are dyadic rationals, so Fractions make the argmin comparison
    exact; ties then break deterministically toward the larger exponent.
    """
    err = Fraction(0)
    scale = Fraction(1, 2**k)
    for w, q in zip(w_row.tolist(), q_w.tolist()):
        d = Fraction(w) - int(q) * scale
        err += d * d
    return err


def quantize_channel_8_search(
    w_row: np.ndarray, bias: float, in_spec: ActSpec, k_cap: int = K_CAP
) -> ChannelQuantResult:
    """8-bit weights: search k in [0, k_max] minimizing the squared weight
    error after clipping to [-128, 127]; ties pick the largest k.

    Errors are compared in float64 first; only candidates within a 1e-9
    relative band of the minimum are re-ranked with exact rationals, so the
    selected index always equals the exact-arithmetic argmin.
    """
    w_row = np.asarray(w_row, dtype=np.float64).reshape(-1)
    k_max = max_safe_exponent(w_row, bias, in_spec, weight_bits=8, k_cap=k_cap)
    feasible = []
    for k in range(k_max + 1):
        q_w = np.clip(_quantize_row(w_row, k), -128, 127)
        q_b = round_half_away(bias * 2 ** (k + in_spec.scale_exp))
        if abs(q_b) > ACC_LIMIT:
            continue
        if not _acc_bound_ok(q_w, q_b, in_spec.clip_bound, ACC_LIMIT):
            continue
        d = w_row - q_w.astype(np.float64) * 2.0**-k
        feasible.append((float(d @ d), k, q_w, q_b))
    if not feasible:
        raise InfeasibleChannelError("8-bit search found no feasible exponent")
    m = min(e for e, *_ in feasible)
    band = [c for c in feasible if c[0] <= m + max(m, 1e-300) * 1e-9]
    if len(band) > 1:
        band = [( _clip_error_exact(w_row, q_w, k), k, q_w, q_b) for _, k, q_w, q_b in band]
        exact_min = min(e for e, *_ in band)
        band = [c for c in band if c[0] == exact_min]
    err, k, q_w, q_b = max(band, key=lambda c: c[1])
    return ChannelQuantResult(k=k, q_weights=q_w, q_bias=q_b, clip_error=float(err))


def _quantize_channel_at_k(
    w_row: np.ndarray, bias: float, in_spec: ActSpec, weight_bits: int, k: int
):
    """Quantize one row at a forced exponent; returns None if infeasible."""
    q_w = _quantize_row(np.asarray(w_row, dtype=np.float64).reshape(-1), k)
    if weight_bits == 8:
        q_w = np.clip(q_w, -128, 127)
    elif np.abs(q_w).max(initial=0) > (1 << 15) - 1:
        return None
    q_b = round_half_away(bias * 2 ** (k + in_spec.scale_exp))
    if abs(q_b) > ACC_LIMIT or not _acc_bound_ok(q_w, q_b, in_spec.clip_bound, ACC_LIMIT):
        return None
    return q_w, q_b


def quantize_layer(
    layer: FloatConvLayer,
    weight_bits: int,
    in_spec: ActSpec,
    out_spec: ActSpec,
    k_cap: int = K_CAP,
) -> QConvLayer:
    """Quantize all channels of a float conv layer.

    Guarantees the requantize shift k_j + a_in - a_out >= 0 for every
    channel: a too-small k_j is pushed up to the minimum feasible value,
    re-validated against the certificate (error if impossible).
    """
    oc = layer.out_ch
    flat = layer.weights.reshape(oc, -1).astype(np.float64)
    k_min = max(0, out_spec.scale_exp - in_spec.scale_exp)
    q_rows = np.zeros((oc, flat.shape[1]), dtype=np.int64)
    ks = np.zeros(oc, dtype=np.int64)
    q_bias = np.zeros(oc, dtype=np.int64)
    for j in range(oc):
        b = float(layer.bias[j])
        if weight_bits == 16:
            res = quantize_channel_16(flat[j], b, in_spec, k_cap=k_cap)
        else:
            res = quantize_channel_8_search(flat[j], b, in_spec, k_cap=k_cap)
        if res.k < k_min:
            forced = _quantize_channel_at_k(flat[j], b, in_spec, weight_bits, k_min)
            if forced is None:
                raise InfeasibleChannelError(
                    f"channel {j}: requantize shift requires k={k_min}, "
                    "which violates the accumulator bound"
                )
            res = ChannelQuantResult(k_min, forced[0], forced[1], res.clip_error)
        ks[j] = res.k
        q_rows[j] = res.q_weights
        q_bias[j] = res.q_bias
    return QConvLayer(
        geometry=layer.geometry,
        weight_bits=weight_bits,
        q_weights=q_rows.reshape(layer.weights.shape),
        k=ks,
        q_bias=q_bias,
        in_spec=in_spec,
        out_spec=out_spec,
        act_shift=layer.act_shift,
    )


@dataclass
class OverflowWitness:
    """Exact worst-case accumulator evaluation for one layer."""

    worst: list  # per-channel |acc| upper bound, attained by sign(w)*Q input
    headroom: list  # ACC_LIMIT - worst
    ok: bool


def witness_from_arrays(q_weights: np.ndarray, q_bias: np.ndarray, clip_bound: int) -> OverflowWitness:
    """Evaluate the adversarial input sign(w_j) * Q with arbitrary-precision
    integers; usable on raw (possibly corrupt) arrays."""
    oc = q_weights.shape[0]
    flat = q_weights.reshape(oc, -1)
    worst = []
    for j in range(oc):
        row = flat[j].tolist()
        acc = sum(abs(int(w)) * clip_bound for w in row) + abs(int(q_bias[j]))
        worst.append(acc)
    headroom = [ACC_LIMIT - w for w in worst]
    return OverflowWitness(worst=worst, headroom=headroom, ok=min(headroom) >= 0)


def overflow_witness_check(layer: QConvLayer) -> OverflowWitness:
    """Certificate audit of a quantized layer; a failing result on pipeline
    output is a build-stopping bug (the constructor enforces the same bound)."""
    return witness_from_arrays(layer.q_weights, layer.q_bias, layer.in_spec.clip_bound)
