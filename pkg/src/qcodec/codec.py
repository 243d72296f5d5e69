"""Encode/decode paths of the hyperprior codec.

The encoder (g_a, h_a, gain) runs in float; the decoder-side path runs in
exact integers wherever subnets are quantized.  Decoded output bytes are a
pure function of (bitstream bytes, model bytes) once all three decoder
subnets are integer.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .entropy import SYMBOL_BOUND, RangeDecoder, RangeEncoder
from .errors import BitstreamError, ModelFormatError
from .imageio import YuvImage, crop, pad_to_multiple
from .model import DOWNSAMPLE, Branch, ModelGraph, Subnet
from .tensor import (
    ActSpec,
    FloatTensor,
    QConvLayer,
    QTensor,
    add_int,
    conv2d_float,
    conv2d_int,
    dequantize_tensor,
    leaky_relu_float,
    leaky_relu_shift,
    quantize_tensor,
    requantize,
)

MAGIC = b"QHC1"
VERSION = 1
_HEADER_FMT = "<4sB8sBHHHH12H4I"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)

Z_SPEC = ActSpec(0, 255)  # hyper latents are plain saturated integers
PIXEL_SPEC = ActSpec(0, 255)  # pinned output spec of the final g_s layer


@dataclass(frozen=True)
class Backend:
    """A conforming execution backend: an integer accumulation schedule
    (all bit-identical) paired with a float accumulation mode (not)."""

    name: str
    int_schedule: str
    float_mode: str


BACKENDS = {
    "reference": Backend("reference", "reference", "sequential"),
    "tiled": Backend("tiled", "tiled", "pairwise"),
    "permuted": Backend("permuted", "permuted", "reversed"),
}


@dataclass
class BranchLatents:
    z_hat: np.ndarray  # (Cz, h, w) int64 in [-255, 255]
    r: np.ndarray  # (Cy, h, w) int64 in [-255, 255]


@dataclass
class Latents:
    y: BranchLatents
    uv: BranchLatents

    def branch(self, name: str) -> BranchLatents:
        return self.y if name == "y" else self.uv


@dataclass
class Bitstream:
    data: bytes

    def header(self) -> dict:
        return parse_header(self.data)

    def payload(self) -> bytes:
        return self.data[HEADER_SIZE:]


@dataclass
class EncodeResult:
    bitstream: Bitstream
    enc_rec: YuvImage
    rate_bits: int


def _round_half_away_arr(v: np.ndarray) -> np.ndarray:
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def _centered_input(img: YuvImage, bname: str) -> FloatTensor:
    if bname == "y":
        planes = img.y[None, :, :]
    else:
        planes = np.stack([img.u, img.v])
    x = (planes.astype(np.float32) - np.float32(128.0)) / np.float32(64.0)
    return FloatTensor(x)


def _as_float(x) -> FloatTensor:
    return x if isinstance(x, FloatTensor) else dequantize_tensor(x)


def _apply_slot(x, layer, backend: Backend):
    """Run one conv slot, adapting between integer and float forms at the
    quantized/float boundary."""
    if isinstance(layer, QConvLayer):
        if isinstance(x, QTensor):
            if x.spec != layer.in_spec:
                raise ModelFormatError(
                    f"layer chain broken: {x.spec} feeds a layer expecting {layer.in_spec}"
                )
            xq = x
        else:
            xq = quantize_tensor(x, layer.in_spec)
        out = requantize(conv2d_int(xq, layer, backend.int_schedule), layer.out_spec)
        if layer.act_shift is not None:
            out = leaky_relu_shift(out, layer.act_shift)
        return out
    xf = _as_float(x)
    out = conv2d_float(xf, layer, backend.float_mode)
    if layer.act_shift is not None:
        out = leaky_relu_float(out, layer.act_shift)
    return out


def run_subnet(subnet: Subnet, x, backend: Backend):
    """Forward through a subnet; residual blocks add in integers when both
    sides are integer at one spec, in float32 otherwise."""
    for node in subnet.nodes:
        if node[0] == "conv":
            x = _apply_slot(x, subnet.slots[node[1]], backend)
        else:
            t = _apply_slot(x, subnet.slots[node[1]], backend)
            t = _apply_slot(t, subnet.slots[node[2]], backend)
            if isinstance(x, QTensor) and isinstance(t, QTensor) and x.spec == t.spec:
                x = add_int(x, t)
            else:
                x = FloatTensor(_as_float(x).data + _as_float(t).data)
    return x


def run_float_subnet(subnet: Subnet, x: FloatTensor, mode: str) -> FloatTensor:
    return run_subnet(subnet, x, Backend("anchor", "reference", mode))


def subnet_stride(subnet: Subnet) -> int:
    s = 1
    for slot in subnet.slots:
        if slot.geometry.kind == "conv":
            s *= slot.geometry.stride
        else:
            s //= slot.geometry.stride
    return s


def predict_bins(model: ModelGraph, branch: Branch, z_hat: np.ndarray, backend: Backend) -> np.ndarray:
    """Sigma bin indices from the decoded hyper latent (integer comparison
    against the stored edges when h_sigma is quantized)."""
    sig = run_subnet(branch.subnets["h_sigma"], QTensor(z_hat, Z_SPEC), backend)
    if isinstance(sig, QTensor):
        if sig.spec.scale_exp != branch.sigma_scale_exp:
            raise ModelFormatError(
                "quantized h_sigma output scale does not match the stored bin edges"
            )
        sig_int = sig.data
    else:
        sig_int = quantize_tensor(sig, ActSpec(branch.sigma_scale_exp, 32767)).data
    return model.tables.bins_for_sigma_int(sig_int, branch.sigma_scale_exp)


def predict_mu(model: ModelGraph, branch: Branch, z_hat: np.ndarray, backend: Backend):
    return run_subnet(branch.subnets["h_mu"], QTensor(z_hat, Z_SPEC), backend)


def hyper_outputs(model: ModelGraph, branch: Branch, z_hat: np.ndarray, backend: Backend):
    """(mu tensor, sigma bin indices) from the decoded hyper latent."""
    bins = predict_bins(model, branch, z_hat, backend)
    mu = predict_mu(model, branch, z_hat, backend)
    return mu, bins


def reconstruct_latent(r: np.ndarray, mu):
    """Form the decoded latent from transmitted residuals: exact fixed
    point r * 2**a + mu_q when the hyper decoder is quantized."""
    if isinstance(mu, QTensor):
        a = mu.spec.scale_exp
        v = (r << np.int64(a)) + mu.data
        np.clip(v, -mu.spec.clip_bound, mu.spec.clip_bound, out=v)
        return QTensor(v, mu.spec)
    return FloatTensor(r.astype(np.float32) + mu.data)


def apply_inverse_gain(y, branch: Branch, rate_point: int, gain_exp: int):
    """Per-channel fixed-point inverse gain (round-half-up shift); the
    16-bit vector times a clipped activation cannot exceed 32 bits."""
    if rate_point >= branch.gain.shape[0]:
        raise ModelFormatError(f"model has no rate point {rate_point}")
    ig = branch.inv_gain[rate_point]
    if isinstance(y, QTensor):
        prod = y.data * ig[:, None, None]
        half = np.int64(1) << (gain_exp - 1)
        v = (prod + half) >> np.int64(gain_exp)
        np.clip(v, -y.spec.clip_bound, y.spec.clip_bound, out=v)
        return QTensor(v, y.spec)
    scale = (ig.astype(np.float32) * np.float32(2.0**-gain_exp))[:, None, None]
    return FloatTensor(y.data * scale)


def _to_plane_values(out) -> np.ndarray:
    """Final 8-bit conversion: requantized integers (or rounded floats) at
    a=0, offset by +128 into [0, 255]."""
    if isinstance(out, QTensor):
        if out.spec.scale_exp != 0:
            raise ModelFormatError("final synthesis layer must requantize to a=0")
        v = out.data
    else:
        v = _round_half_away_arr(out.data.astype(np.float64))
    return np.clip(v + 128, 0, 255).astype(np.uint8)


def synthesize_branch(
    model: ModelGraph,
    bname: str,
    bl: BranchLatents,
    rate_point: int,
    backend: Backend,
    mu=None,
    yhat=None,
) -> np.ndarray:
    """One branch's reconstruction planes; `mu` or the inverse-gained
    latent `yhat` may be supplied precomputed (pure-function shortcuts)."""
    branch = model.branches[bname]
    if yhat is None:
        if mu is None:
            mu, _ = hyper_outputs(model, branch, bl.z_hat, backend)
        yhat = reconstruct_latent(bl.r, mu)
        yhat = apply_inverse_gain(yhat, branch, rate_point, model.gain_exp)
    out = run_subnet(branch.subnets["g_s"], yhat, backend)
    return _to_plane_values(out)


def synthesize(model: ModelGraph, lat: Latents, rate_point: int, backend: Backend) -> YuvImage:
    """Decoder-side reconstruction from latents (shared by the encoder's
    local reconstruction and by decode)."""
    y = synthesize_branch(model, "y", lat.y, rate_point, backend)
    uv = synthesize_branch(model, "uv", lat.uv, rate_point, backend)
    return YuvImage(y[0], uv[0], uv[1])


def decode_latents(model: ModelGraph, lat: Latents, rate_point: int, backend: Backend) -> dict:
    """Latent-only reconstruction (the computer-vision entry point)."""
    out = {}
    for bname in ("y", "uv"):
        branch = model.branches[bname]
        bl = lat.branch(bname)
        mu, _ = hyper_outputs(model, branch, bl.z_hat, backend)
        yhat = reconstruct_latent(bl.r, mu)
        out[bname] = apply_inverse_gain(yhat, branch, rate_point, model.gain_exp)
    return out


def _latent_dims(model: ModelGraph, bname: str, pw: int, ph: int):
    branch = model.branches[bname]
    div = 2 if bname == "uv" else 1
    ga = subnet_stride(branch.subnets["g_a"]) * div
    ha = subnet_stride(branch.subnets["h_a"])
    cy = branch.latent_channels
    cz = branch.hyper_channels
    return (cy, ph // ga, pw // ga), (cz, ph // (ga * ha), pw // (ga * ha))


def residual_symbols(y_g: np.ndarray, mu) -> np.ndarray:
    """Transmitted residual r = round(y_gained - mu), saturated to the
    entropy tables' symbol range."""
    mu_f = _as_float(mu).data.astype(np.float64)
    return np.clip(
        _round_half_away_arr(y_g.astype(np.float64) - mu_f),
        -SYMBOL_BOUND,
        SYMBOL_BOUND,
    )


def _encode_branch_latents(img: YuvImage, model: ModelGraph, bname: str, rate_point: int, backend: Backend):
    branch = model.branches[bname]
    x = _centered_input(img, bname)
    y_lat = run_float_subnet(branch.subnets["g_a"], x, "sequential")
    gain = branch.gain[rate_point][:, None, None]
    y_g = FloatTensor(y_lat.data * gain)
    z = run_float_subnet(branch.subnets["h_a"], y_g, "sequential")
    z_hat = np.clip(_round_half_away_arr(z.data.astype(np.float64)), -SYMBOL_BOUND, SYMBOL_BOUND)
    mu, bins = hyper_outputs(model, branch, z_hat, backend)
    r = residual_symbols(y_g.data, mu)
    return BranchLatents(z_hat=z_hat, r=r), bins


def _code_symbols(values: np.ndarray, cdf: list) -> bytes:
    enc = RangeEncoder()
    for s in (values.reshape(-1) + SYMBOL_BOUND).tolist():
        enc.encode(cdf, s)
    return enc.finish()


def _code_symbols_binned(values: np.ndarray, bins: np.ndarray, tables) -> bytes:
    enc = RangeEncoder()
    flat = (values.reshape(-1) + SYMBOL_BOUND).tolist()
    for s, b in zip(flat, bins.reshape(-1).tolist()):
        enc.encode(tables.cdf_list(b), s)
    return enc.finish()


def _decode_symbols(data: bytes, cdf: list, shape) -> np.ndarray:
    dec = RangeDecoder(data)
    out = np.asarray([dec.decode(cdf) for _ in range(int(np.prod(shape)))], dtype=np.int64)
    return out.reshape(shape) - SYMBOL_BOUND


def _decode_symbols_binned(data: bytes, bins: np.ndarray, tables) -> np.ndarray:
    dec = RangeDecoder(data)
    out = np.asarray(
        [dec.decode(tables.cdf_list(b)) for b in bins.reshape(-1).tolist()],
        dtype=np.int64,
    )
    return out.reshape(bins.shape) - SYMBOL_BOUND


def encode(
    img: YuvImage, model: ModelGraph, rate_point: int, backend: Backend = BACKENDS["reference"]
) -> EncodeResult:
    """Full encode: float analysis, entropy coding, and the encoder-side
    reconstruction through the (possibly quantized) decoder path."""
    if not 0 <= rate_point < model.num_rate_points:
        raise ModelFormatError(f"model has no rate point {rate_point}")
    if img.width > 0xFFFF or img.height > 0xFFFF:
        raise BitstreamError("image dims overflow the 16-bit header fields")
    padded = pad_to_multiple(img, DOWNSAMPLE)
    lat_y, bins_y = _encode_branch_latents(padded, model, "y", rate_point, backend)
    lat_uv, bins_uv = _encode_branch_latents(padded, model, "uv", rate_point, backend)
    lat = Latents(y=lat_y, uv=lat_uv)

    z_cdf = model.tables.z_cdf.tolist()
    sections = [
        _code_symbols(lat_y.z_hat, z_cdf),
        _code_symbols_binned(lat_y.r, bins_y, model.tables),
        _code_symbols(lat_uv.z_hat, z_cdf),
        _code_symbols_binned(lat_uv.r, bins_uv, model.tables),
    ]

    (cy, yh, yw), (cz, zh, zw) = _latent_dims(model, "y", padded.width, padded.height)
    (cu, uh, uw), (cuz, uzh, uzw) = _latent_dims(model, "uv", padded.width, padded.height)
    header = struct.pack(
        _HEADER_FMT,
        MAGIC,
        VERSION,
        bytes.fromhex(model.model_id),
        rate_point,
        img.width,
        img.height,
        padded.width,
        padded.height,
        cy, yh, yw,
        cz, zh, zw,
        cu, uh, uw,
        cuz, uzh, uzw,
        *[len(s) for s in sections],
    )
    data = header + b"".join(sections)
    enc_rec_padded = synthesize(model, lat, rate_point, backend)
    enc_rec = crop(enc_rec_padded, img.width, img.height)
    return EncodeResult(
        bitstream=Bitstream(data),
        enc_rec=enc_rec,
        rate_bits=8 * sum(len(s) for s in sections),
    )


def parse_header(data: bytes) -> dict:
    if len(data) < HEADER_SIZE:
        raise BitstreamError("bitstream shorter than its header")
    fields = struct.unpack(_HEADER_FMT, data[:HEADER_SIZE])
    if fields[0] != MAGIC:
        raise BitstreamError("bad magic")
    if fields[1] != VERSION:
        raise BitstreamError(f"unsupported version {fields[1]}")
    return {
        "model_id": fields[2].hex(),
        "rate_point": fields[3],
        "orig_w": fields[4],
        "orig_h": fields[5],
        "pad_w": fields[6],
        "pad_h": fields[7],
        "y_latent": tuple(fields[8:11]),
        "y_hyper": tuple(fields[11:14]),
        "uv_latent": tuple(fields[14:17]),
        "uv_hyper": tuple(fields[17:20]),
        "sections": tuple(fields[20:24]),
    }


def _split_sections(data: bytes, hdr: dict) -> list:
    out = []
    pos = HEADER_SIZE
    for n in hdr["sections"]:
        if pos + n > len(data):
            raise BitstreamError("payload sections exceed bitstream length")
        out.append(data[pos : pos + n])
        pos += n
    return out


def _decode_to_latents(data: bytes, model: ModelGraph, backend: Backend):
    hdr = parse_header(data)
    if hdr["model_id"] != model.model_id:
        raise BitstreamError("bitstream was produced by a different model")
    if not 0 <= hdr["rate_point"] < model.num_rate_points:
        raise BitstreamError("rate point outside the model's range")
    for bname, lkey, hkey in (("y", "y_latent", "y_hyper"), ("uv", "uv_latent", "uv_hyper")):
        want = _latent_dims(model, bname, hdr["pad_w"], hdr["pad_h"])
        if (hdr[lkey], hdr[hkey]) != want:
            raise BitstreamError("latent dims in header do not match the model")
    sections = _split_sections(data, hdr)
    z_cdf = model.tables.z_cdf.tolist()
    lat = {}
    bins = {}
    for bname, zsec, rsec in (("y", 0, 1), ("uv", 2, 3)):
        branch = model.branches[bname]
        lshape = hdr[f"{bname}_latent"]
        zshape = hdr[f"{bname}_hyper"]
        z_hat = _decode_symbols(sections[zsec], z_cdf, zshape)
        _, b = hyper_outputs(model, branch, z_hat, backend)
        if b.shape != lshape:
            raise BitstreamError("hyper output does not match latent dims")
        r = _decode_symbols_binned(sections[rsec], b, model.tables)
        lat[bname] = BranchLatents(z_hat=z_hat, r=r)
        bins[bname] = b
    return hdr, Latents(y=lat["y"], uv=lat["uv"]), bins


def decode(data: bytes, model: ModelGraph, backend: Backend = BACKENDS["reference"]) -> YuvImage:
    """Reconstruct 8-bit planes from a bitstream; with a fully quantized
    decoder the output bytes depend only on (bitstream bytes, model bytes)."""
    hdr, lat, _ = _decode_to_latents(data, model, backend)
    rec = synthesize(model, lat, hdr["rate_point"], backend)
    return crop(rec, hdr["orig_w"], hdr["orig_h"])


def decode_latent_only(data: bytes, model: ModelGraph, backend: Backend = BACKENDS["reference"]) -> dict:
    """Stop after latent reconstruction; exact when h_sigma and h_mu are
    quantized."""
    hdr, lat, _ = _decode_to_latents(data, model, backend)
    return decode_latents(model, lat, hdr["rate_point"], backend)


def branch_rate_bits(model: ModelGraph, bl: BranchLatents, bins: np.ndarray) -> float:
    """Ideal codelength (bits) of one branch's latents under the tables."""
    zf = model.tables.z_freqs
    rf = model.tables.r_freqs
    bits = float(np.sum(16 - np.log2(zf[bl.z_hat.reshape(-1) + SYMBOL_BOUND])))
    bits += float(
        np.sum(16 - np.log2(rf[bins.reshape(-1), bl.r.reshape(-1) + SYMBOL_BOUND]))
    )
    return bits


def estimate_rate(model: ModelGraph, lat: Latents, bins: dict) -> float:
    """Ideal codelength (bits) of the latents under the model tables; used
    for calibration RD points in place of a full range-coding pass."""
    return branch_rate_bits(model, lat.y, bins["y"]) + branch_rate_bits(
        model, lat.uv, bins["uv"]
    )
