"""Deterministic tensor arithmetic.

Float reference ops for the encoder/anchor side, and exact integer ops with
a 32-bit accumulator contract for the quantized decoder.  All integer math
is carried in int64 arrays; values are guaranteed to stay within the signed
32-bit range by the per-layer no-overflow certificate, so any accumulation
order yields identical results.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CertificateError, SpecMismatchError

ACC_LIMIT = (1 << 31) - 1
ACT_BOUND_MAX = (1 << 15) - 1

# Integer accumulation schedules (all exact, hence equivalent) and float
# accumulation modes (inequivalent by design; "sequential" is the anchor).
INT_SCHEDULES = ("reference", "tiled", "permuted")
FLOAT_MODES = ("sequential", "reversed", "pairwise")


@dataclass(frozen=True)
class ActSpec:
    """Per-layer activation format: value q represents q * 2**-scale_exp,
    with |q| clipped to clip_bound."""

    scale_exp: int
    clip_bound: int

    def __post_init__(self):
        if not 0 <= self.scale_exp <= 15:
            raise ValueError(f"scale_exp {self.scale_exp} outside [0, 15]")
        if not 1 <= self.clip_bound <= ACT_BOUND_MAX:
            raise ValueError(f"clip_bound {self.clip_bound} outside [1, {ACT_BOUND_MAX}]")


@dataclass
class FloatTensor:
    """(channels, height, width) float32 tensor, row-major."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"expected (C, H, W), got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class QTensor:
    """Integer activation tensor; every element within [-Q, Q] of its spec."""

    data: np.ndarray
    spec: ActSpec

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.int64)
        if self.data.ndim != 3:
            raise ValueError(f"expected (C, H, W), got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    def validate(self):
        q = self.spec.clip_bound
        if self.data.size and int(np.abs(self.data).max()) > q:
            raise ValueError("element magnitude exceeds the spec clip bound")


@dataclass
class AccTensor:
    """32-bit accumulator tensor with per-channel scale exponents
    (weight exponent k_j + input scale exponent)."""

    data: np.ndarray
    scale_exp: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.int64)
        self.scale_exp = np.ascontiguousarray(self.scale_exp, dtype=np.int64)
        if self.data.ndim != 3:
            raise ValueError(f"expected (C, H, W), got shape {self.data.shape}")
        if self.scale_exp.shape != (self.data.shape[0],):
            raise ValueError("scale_exp must have one entry per channel")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class ConvGeometry:
    """Topology of one convolution layer (shared by float and integer forms)."""

    kind: str  # "conv" | "tconv"
    stride: int
    padding: int

    def __post_init__(self):
        if self.kind not in ("conv", "tconv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("invalid stride/padding")

    def out_hw(self, h: int, w: int, kh: int, kw: int) -> tuple[int, int]:
        if self.kind == "conv":
            oh = (h + 2 * self.padding - kh) // self.stride + 1
            ow = (w + 2 * self.padding - kw) // self.stride + 1
        else:
            oh = (h - 1) * self.stride - 2 * self.padding + kh
            ow = (w - 1) * self.stride - 2 * self.padding + kw
        if oh < 1 or ow < 1:
            raise ValueError(f"layer geometry collapses {h}x{w} to {oh}x{ow}")
        return oh, ow


@dataclass
class QConvLayer:
    """Quantized convolution: per-output-channel integer weights with
    exponents k_j, 32-bit bias at scale 2**-(k_j + a_in), and the output
    requantization spec.

    Certificate (checked on construction): for every output channel j,
    sum_i |q_weights[j,i]| * in_spec.Q + |q_bias[j]| <= 2**31 - 1, which
    bounds the accumulator for every admissible input.
    """

    geometry: ConvGeometry
    weight_bits: int
    q_weights: np.ndarray  # (out_ch, in_ch, kh, kw) int64
    k: np.ndarray  # (out_ch,) weight scale exponents
    q_bias: np.ndarray  # (out_ch,) int64 within int32 range
    in_spec: ActSpec
    out_spec: ActSpec
    act_shift: int | None = None  # bit-shift LeakyReLU amount, None = linear

    def __post_init__(self):
        self.q_weights = np.ascontiguousarray(self.q_weights, dtype=np.int64)
        self.k = np.ascontiguousarray(self.k, dtype=np.int64)
        self.q_bias = np.ascontiguousarray(self.q_bias, dtype=np.int64)
        if self.q_weights.ndim != 4:
            raise ValueError("q_weights must be (out_ch, in_ch, kh, kw)")
        oc = self.q_weights.shape[0]
        if self.k.shape != (oc,) or self.q_bias.shape != (oc,):
            raise ValueError("k and q_bias must have one entry per output channel")
        if self.weight_bits not in (8, 16):
            raise ValueError("weight_bits must be 8 or 16")
        if self.act_shift is not None and not 1 <= self.act_shift <= 15:
            raise ValueError("activation shift outside [1, 15]")
        wmax = 1 << (self.weight_bits - 1)
        if self.q_weights.size and not (
            self.q_weights.min() >= -wmax and self.q_weights.max() <= wmax - 1
        ):
            raise CertificateError(
                f"weights exceed the {self.weight_bits}-bit range [{-wmax}, {wmax - 1}]"
            )
        if np.abs(self.q_bias).max(initial=0) > ACC_LIMIT:
            raise CertificateError("bias exceeds the 32-bit range")
        bad = self.certificate_slack() < 0
        if bad.any():
            js = np.nonzero(bad)[0].tolist()
            raise CertificateError(f"accumulator certificate violated for channels {js}")

    @property
    def out_ch(self) -> int:
        return self.q_weights.shape[0]

    @property
    def in_ch(self) -> int:
        return self.q_weights.shape[1]

    def certificate_slack(self) -> np.ndarray:
        """Per-channel headroom: 2**31-1 minus the exact worst-case |acc|."""
        q = self.in_spec.clip_bound
        # Exact in int64: |w| sums <= oc*ic*kh*kw * 2^15, * Q <= 2^15 stays < 2^63.
        wsum = np.abs(self.q_weights).sum(axis=(1, 2, 3))
        worst = wsum * q + np.abs(self.q_bias)
        return ACC_LIMIT - worst


def _check_conv_input(x_shape, weights_shape):
    if x_shape[0] != weights_shape[1]:
        raise ValueError(
            f"input has {x_shape[0]} channels, layer expects {weights_shape[1]}"
        )


def _zero_stuff(x: np.ndarray, stride: int) -> np.ndarray:
    """Insert stride-1 zeros between elements (transposed-conv lowering)."""
    if stride == 1:
        return x
    c, h, w = x.shape
    out = np.zeros((c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=x.dtype)
    out[:, ::stride, ::stride] = x
    return out


def _lower_geometry(x: np.ndarray, w: np.ndarray, geo: ConvGeometry):
    """Reduce conv and tconv to a stride-`s` cross-correlation on a padded
    input; returns (padded input, weights, stride, (oh, ow))."""
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = geo.out_hw(x.shape[1], x.shape[2], kh, kw)
    if geo.kind == "conv":
        pad, stride = geo.padding, geo.stride
    else:
        x = _zero_stuff(x, geo.stride)
        w = w[:, :, ::-1, ::-1]
        pad, stride = kh - 1 - geo.padding, 1
        if pad < 0:
            raise ValueError("tconv padding exceeds kernel-1")
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    return x, w, stride, (oh, ow)


def _tap_view(xp: np.ndarray, i: int, j: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(C, oh, ow) strided view of the padded input for kernel tap (i, j)."""
    return xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride]


def _conv_int_reference(xp, w, stride, oh, ow):
    # float64 BLAS is exact here: every product is <= 2^30 and every partial
    # sum is an integer bounded by the certificate, far below 2^53.
    c = xp.shape[0]
    oc, _, kh, kw = w.shape
    acc = np.zeros((oc, oh * ow), dtype=np.float64)
    wf = w.astype(np.float64)
    xf = xp.astype(np.float64)
    for i in range(kh):
        for j in range(kw):
            cols = _tap_view(xf, i, j, stride, oh, ow).reshape(c, oh * ow)
            acc += wf[:, :, i, j] @ cols
    return acc.astype(np.int64).reshape(oc, oh, ow)


def _conv_int_tiled(xp, w, stride, oh, ow, block=8):
    # Same sum, grouped into input-channel tiles accumulated in int64.
    c = xp.shape[0]
    oc, _, kh, kw = w.shape
    acc = np.zeros((oc, oh * ow), dtype=np.int64)
    for c0 in range(0, c, block):
        c1 = min(c0 + block, c)
        for i in range(kh):
            for j in range(kw):
                cols = _tap_view(xp, i, j, stride, oh, ow)[c0:c1].reshape(c1 - c0, -1)
                acc += w[:, c0:c1, i, j] @ cols
    return acc.reshape(oc, oh, ow)


def _conv_int_permuted(xp, w, stride, oh, ow):
    # Taps visited in a fixed shuffled order, channels reversed.
    c = xp.shape[0]
    oc, _, kh, kw = w.shape
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    taps = taps[1::2] + taps[0::2][::-1]
    acc = np.zeros((oc, oh * ow), dtype=np.int64)
    for i, j in taps:
        cols = _tap_view(xp, i, j, stride, oh, ow)[::-1].reshape(c, -1)
        acc += w[:, ::-1, i, j] @ cols
    return acc.reshape(oc, oh, ow)


_INT_IMPLS = {
    "reference": _conv_int_reference,
    "tiled": _conv_int_tiled,
    "permuted": _conv_int_permuted,
}


def conv2d_int(x: QTensor, layer: QConvLayer, schedule: str = "reference") -> AccTensor:
    """Exact integer convolution under the layer's no-overflow certificate.

    The result is the exact sum sum(q_w * q_x) + q_bias per output element,
    identical for every schedule; scale is k_j + a_in per channel.
    """
    if schedule not in _INT_IMPLS:
        raise ValueError(f"unknown schedule {schedule!r}")
    if x.spec != layer.in_spec:
        raise SpecMismatchError(
            f"input spec {x.spec} != layer input spec {layer.in_spec}"
        )
    _check_conv_input(x.shape, layer.q_weights.shape)
    xp, w, stride, (oh, ow) = _lower_geometry(x.data, layer.q_weights, layer.geometry)
    acc = _INT_IMPLS[schedule](xp, w, stride, oh, ow)
    acc += layer.q_bias[:, None, None]
    return AccTensor(acc, layer.k + layer.in_spec.scale_exp)


def requantize(acc: AccTensor, out: ActSpec) -> QTensor:
    """Round-half-up shift from the accumulator scale to `out`, then clip.

    round_half_up_shift(v, s) = (v + 2**(s-1)) >> s for s > 0 (arithmetic
    shift), identity for s = 0.
    """
    shift = acc.scale_exp - out.scale_exp
    if (shift < 0).any():
        raise ValueError("negative requantize shift (layer configuration error)")
    s = shift[:, None, None]
    half = np.where(s > 0, np.int64(1) << np.maximum(s - 1, 0), np.int64(0))
    v = (acc.data + half) >> s
    np.clip(v, -out.clip_bound, out.clip_bound, out=v)
    return QTensor(v, out)


def leaky_relu_shift(x: QTensor, s: int) -> QTensor:
    """Bit-shift LeakyReLU: negatives are arithmetic-shifted right by s
    (floor semantics), non-negatives pass through. Spec unchanged."""
    if not 1 <= s <= 15:
        raise ValueError("shift amount outside [1, 15]")
    v = x.data
    return QTensor(np.where(v >= 0, v, v >> np.int64(s)), x.spec)


def add_int(a: QTensor, b: QTensor) -> QTensor:
    """Saturating elementwise add of two tensors sharing one spec."""
    if a.spec != b.spec:
        raise SpecMismatchError(f"specs differ: {a.spec} vs {b.spec}")
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    q = a.spec.clip_bound
    v = a.data + b.data
    np.clip(v, -q, q, out=v)
    return QTensor(v, a.spec)


def quantize_tensor(x: FloatTensor, spec: ActSpec) -> QTensor:
    """Float -> integer: round half away from zero at scale 2**a, clip to Q."""
    v = x.data.astype(np.float64) * float(1 << spec.scale_exp)
    q = np.sign(v) * np.floor(np.abs(v) + 0.5)
    q = np.clip(q, -spec.clip_bound, spec.clip_bound)
    return QTensor(q.astype(np.int64), spec)


def dequantize_tensor(x: QTensor) -> FloatTensor:
    """Integer -> float: v * 2**-a, exact in float32 for every spec value."""
    return FloatTensor(x.data.astype(np.float32) * np.float32(2.0 ** -x.spec.scale_exp))


@dataclass
class FloatConvLayer:
    """Float reference convolution (encoder side / unquantized anchor)."""

    geometry: ConvGeometry
    weights: np.ndarray  # (out_ch, in_ch, kh, kw) float32
    bias: np.ndarray  # (out_ch,) float32
    act_shift: int | None = None  # LeakyReLU with slope 2**-act_shift

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        if self.weights.ndim != 4:
            raise ValueError("weights must be (out_ch, in_ch, kh, kw)")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias must have one entry per output channel")

    @property
    def out_ch(self) -> int:
        return self.weights.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weights.shape[1]


def _conv_float_sequential(xp, w, b, stride, oh, ow):
    # Deterministic anchor: float64 accumulation in natural tap order via
    # einsum (no BLAS threading), rounded to float32 once at the end.
    oc, _, kh, kw = w.shape
    acc = np.empty((oc, oh, ow), dtype=np.float64)
    acc[:] = b.astype(np.float64)[:, None, None]
    wf = w.astype(np.float64)
    xf = xp.astype(np.float64)
    tmp = np.empty_like(acc)
    for i in range(kh):
        for j in range(kw):
            np.einsum(
                "oc,chw->ohw",
                wf[:, :, i, j],
                _tap_view(xf, i, j, stride, oh, ow),
                out=tmp,
            )
            acc += tmp
    return acc.astype(np.float32)


def _float_steps(xp, w, stride, oh, ow):
    """One float32 rank-1 update per (channel, tap) reduction step."""
    c = xp.shape[0]
    _, _, kh, kw = w.shape
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                tap = _tap_view(xp, i, j, stride, oh, ow)[ci].reshape(-1)
                yield w[:, ci, i, j, None] * tap[None, :]


def _conv_float_reversed(xp, w, b, stride, oh, ow):
    # Strict float32 accumulation, reduction steps in reversed order,
    # bias added last.
    oc = w.shape[0]
    acc = np.zeros((oc, oh * ow), dtype=np.float32)
    for step in reversed(list(_float_steps(xp, w, stride, oh, ow))):
        acc = acc + step.astype(np.float32)
    acc = acc + b[:, None]
    return acc.reshape(oc, oh, ow)


def _conv_float_pairwise(xp, w, b, stride, oh, ow):
    # Strict float32 accumulation over a balanced binary tree; the bias is
    # one extra leaf.
    oc = w.shape[0]
    leaves = [step.astype(np.float32) for step in _float_steps(xp, w, stride, oh, ow)]
    leaves.append(np.broadcast_to(b[:, None], (oc, oh * ow)).astype(np.float32))
    while len(leaves) > 1:
        nxt = [
            leaves[i] + leaves[i + 1] if i + 1 < len(leaves) else leaves[i]
            for i in range(0, len(leaves), 2)
        ]
        leaves = nxt
    return leaves[0].reshape(oc, oh, ow)


_FLOAT_IMPLS = {
    "sequential": _conv_float_sequential,
    "reversed": _conv_float_reversed,
    "pairwise": _conv_float_pairwise,
}


def conv2d_float(x: FloatTensor, layer: FloatConvLayer, mode: str = "sequential") -> FloatTensor:
    """Float cross-correlation. "sequential" is the reproducible anchor;
    the other modes reorder the accumulation and may differ in the last ulp
    (or worse, on adversarial weights)."""
    if mode not in _FLOAT_IMPLS:
        raise ValueError(f"unknown float mode {mode!r}")
    _check_conv_input(x.shape, layer.weights.shape)
    xp, w, stride, (oh, ow) = _lower_geometry(x.data, layer.weights, layer.geometry)
    out = _FLOAT_IMPLS[mode](xp, w, layer.bias, stride, oh, ow)
    return FloatTensor(out)


def leaky_relu_float(x: FloatTensor, s: int) -> FloatTensor:
    """Float LeakyReLU with the power-of-two slope 2**-s (exact in float32)."""
    v = x.data
    return FloatTensor(np.where(v >= 0, v, v * np.float32(2.0 ** -s)))
