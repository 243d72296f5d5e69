"""Three-step decoder quantization driven by calibration BD-rate.

Steps run in the fixed order h_sigma, h_mu, g_s; each step reuses the
model with the previous steps' subnets already quantized.  Within a step,
per-layer activation specs are searched over the configured grid against
the mean mixed BD-rate of a calibration set (float anchor as reference);
encoder-side outputs are cached since g_a/h_a never change.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .codec import (
    BACKENDS,
    BranchLatents,
    Z_SPEC,
    PIXEL_SPEC,
    _centered_input,
    _round_half_away_arr,
    apply_inverse_gain,
    branch_rate_bits,
    hyper_outputs,
    predict_bins,
    predict_mu,
    reconstruct_latent,
    residual_symbols,
    run_float_subnet,
    synthesize_branch,
)
from .entropy import SYMBOL_BOUND
from .errors import CertificateError, DegenerateCurveError, InfeasibleChannelError
from .imageio import pad_to_multiple
from .metrics import RDCurve, bd_rate, mixed_bd_rate, ms_ssim, psnr, yuv_psnr
from .model import DOWNSAMPLE, ModelGraph
from .quantize import QuantConfig, overflow_witness_check, quantize_layer
from .tensor import ActSpec, QConvLayer

_REF = BACKENDS["reference"]

BD_METRICS = ("ms_ssim", "y_psnr", "u_psnr", "v_psnr", "yuv_psnr")

# BD-rate on a near-flat curve is numerically correct but meaningless (the
# rate/quality slope explodes), so an image contributes to a metric's
# average only when the anchor's quality span carries a stable fit.
BD_MIN_SPAN = {"ms_ssim": 0.002}
BD_MIN_SPAN_DEFAULT = 1.0  # dB, PSNR-family metrics


def _anchor_supports_bd(curve: RDCurve, metric: str) -> bool:
    try:
        finite = curve.finite()
        finite.validate()
    except DegenerateCurveError:
        return False
    quals = [q for _, q in finite.points]
    span = max(quals) - min(quals)
    return span >= BD_MIN_SPAN.get(metric, BD_MIN_SPAN_DEFAULT)


@dataclass
class _ImagePoint:
    """Cached encoder-side state for one (image, rate point)."""

    y_g: dict  # branch -> float32 (C,h,w) gained latent
    z_hat: dict  # branch -> int64 hyper symbols
    pixels: int


@dataclass
class CalibrationSet:
    """Calibration images with cached float-encoder outputs and the float
    anchor's per-image RD curves."""

    images: list
    names: list
    rate_points: list
    points: dict = field(default_factory=dict)  # (img_idx, rp) -> _ImagePoint
    anchor_curves: list = field(default_factory=list)  # per image: metric -> RDCurve
    anchor_valid: dict = field(default_factory=dict)  # (img_idx, metric) -> bool

    def __post_init__(self):
        if not self.images:
            raise ValueError("calibration set must be non-empty")

    @classmethod
    def prepare(cls, model: ModelGraph, images, names=None, rate_points=None):
        rate_points = list(rate_points or range(model.num_rate_points))
        names = list(names or [f"img{i}" for i in range(len(images))])
        calib = cls(images=list(images), names=names, rate_points=rate_points)
        for idx, img in enumerate(calib.images):
            padded = pad_to_multiple(img, DOWNSAMPLE)
            for rp in rate_points:
                y_g = {}
                z_hat = {}
                for bname in ("y", "uv"):
                    branch = model.branches[bname]
                    x = _centered_input(padded, bname)
                    y_lat = run_float_subnet(branch.subnets["g_a"], x, "sequential")
                    g = branch.gain[rp][:, None, None]
                    y_g[bname] = y_lat.data * g
                    z = run_float_subnet(
                        branch.subnets["h_a"],
                        type(y_lat)(y_g[bname]),
                        "sequential",
                    )
                    z_hat[bname] = np.clip(
                        _round_half_away_arr(z.data.astype(np.float64)),
                        -SYMBOL_BOUND,
                        SYMBOL_BOUND,
                    )
                calib.points[(idx, rp)] = _ImagePoint(
                    y_g=y_g, z_hat=z_hat, pixels=img.width * img.height
                )
        calib.anchor_curves = [
            _image_curves(model, calib, idx) for idx in range(len(calib.images))
        ]
        calib.anchor_valid = {
            (idx, m): _anchor_supports_bd(calib.anchor_curves[idx][m], m)
            for idx in range(len(calib.images))
            for m in BD_METRICS
        }
        return calib


def _decode_branch_point(model: ModelGraph, calib: CalibrationSet, bname: str, idx: int, rp: int):
    """One branch's decode from cached encoder outputs: (planes, bits)."""
    pt = calib.points[(idx, rp)]
    branch = model.branches[bname]
    mu, bins = hyper_outputs(model, branch, pt.z_hat[bname], _REF)
    r = residual_symbols(pt.y_g[bname], mu)
    bl = BranchLatents(z_hat=pt.z_hat[bname], r=r)
    planes = synthesize_branch(model, bname, bl, rp, _REF, mu=mu)
    return planes, branch_rate_bits(model, bl, bins)


def _curves_from_samples(samples) -> dict:
    return {m: RDCurve([(s["rate"], s[m]) for s in samples]) for m in BD_METRICS}


def _point_metrics(img, y_plane, u_plane, v_plane, bpp) -> dict:
    h, w = img.y.shape
    y_db = psnr(img.y, y_plane[:h, :w])
    u_db = psnr(img.u, u_plane[: h // 2, : w // 2])
    v_db = psnr(img.v, v_plane[: h // 2, : w // 2])
    return {
        "rate": bpp,
        "ms_ssim": ms_ssim(img.y, y_plane[:h, :w]),
        "y_psnr": y_db,
        "u_psnr": u_db,
        "v_psnr": v_db,
        "yuv_psnr": yuv_psnr(y_db, u_db, v_db),
    }


def _image_curves(model: ModelGraph, calib: CalibrationSet, idx: int) -> dict:
    """Per-metric RD curves of the current model for one image."""
    img = calib.images[idx]
    samples = []
    for rp in calib.rate_points:
        y_planes, y_bits = _decode_branch_point(model, calib, "y", idx, rp)
        uv_planes, uv_bits = _decode_branch_point(model, calib, "uv", idx, rp)
        bpp = (y_bits + uv_bits) / calib.points[(idx, rp)].pixels
        samples.append(
            _point_metrics(img, y_planes[0], uv_planes[0], uv_planes[1], bpp)
        )
    return _curves_from_samples(samples)


def evaluate_bd(model: ModelGraph, calib: CalibrationSet, metrics=BD_METRICS) -> dict:
    """Mean per-metric BD-rate of `model` against the anchor curves for the
    report rows.  An image contributes to a metric only when its anchor
    curve supports a stable fit and the model's own curve is not
    degenerate (inf when no image qualifies at all)."""
    sums = {m: 0.0 for m in metrics}
    counts = {m: 0 for m in metrics}
    for idx in range(len(calib.images)):
        cur = _image_curves(model, calib, idx)
        for m in metrics:
            if not calib.anchor_valid.get((idx, m), True):
                continue
            try:
                sums[m] += bd_rate(calib.anchor_curves[idx][m], cur[m])
                counts[m] += 1
            except DegenerateCurveError:
                continue
    out = {
        m: (sums[m] / counts[m]) if counts[m] else math.inf for m in metrics
    }
    out["mixed"] = mixed_bd_rate(out["yuv_psnr"], out["ms_ssim"])
    return out


def _subnet_walk(subnet):
    """Yield (slot_idx, role) in execution order; roles are 'plain',
    'res_first', and 'res_second'."""
    for node in subnet.nodes:
        if node[0] == "conv":
            yield node[1], "plain"
        else:
            yield node[1], "res_first"
            yield node[2], "res_second"


def _grid_order(grid):
    # Tie-break preference: larger clip bound, then larger scale exponent.
    return sorted(grid, key=lambda s: (-s.clip_bound, -s.scale_exp))


class _LayerSearch:
    """Candidate evaluator for one layer's activation-spec search.

    Everything a candidate cannot influence is computed once and frozen:
    the other color branch entirely, and within the searched branch the
    stages the subnet under change cannot touch (h_sigma only moves rates,
    h_mu moves residuals and the latent, g_s only moves reconstruction).
    The scores are bitwise identical to a full re-evaluation."""

    def __init__(self, model: ModelGraph, calib: CalibrationSet, bname: str, sname: str):
        self.model = model
        self.calib = calib
        self.bname = bname
        self.sname = sname
        self.other = "uv" if bname == "y" else "y"
        self.static = {}
        branch = model.branches[bname]
        for idx in range(len(calib.images)):
            for rp in calib.rate_points:
                pt = calib.points[(idx, rp)]
                st = {"other": _decode_branch_point(model, calib, self.other, idx, rp)}
                z_hat = pt.z_hat[bname]
                if sname == "h_sigma":
                    mu = predict_mu(model, branch, z_hat, _REF)
                    bl = BranchLatents(z_hat=z_hat, r=residual_symbols(pt.y_g[bname], mu))
                    st["bl"] = bl
                    st["planes"] = synthesize_branch(model, bname, bl, rp, _REF, mu=mu)
                elif sname == "h_mu":
                    st["bins"] = predict_bins(model, branch, z_hat, _REF)
                else:
                    mu = predict_mu(model, branch, z_hat, _REF)
                    bins = predict_bins(model, branch, z_hat, _REF)
                    bl = BranchLatents(z_hat=z_hat, r=residual_symbols(pt.y_g[bname], mu))
                    yhat = reconstruct_latent(bl.r, mu)
                    st["yhat"] = apply_inverse_gain(yhat, branch, rp, model.gain_exp)
                    st["bits"] = branch_rate_bits(model, bl, bins)
                self.static[(idx, rp)] = st

    def _branch_point(self, idx: int, rp: int):
        """(planes, bits) of the searched branch under the current model."""
        st = self.static[(idx, rp)]
        model = self.model
        branch = model.branches[self.bname]
        pt = self.calib.points[(idx, rp)]
        if self.sname == "h_sigma":
            bins = predict_bins(model, branch, pt.z_hat[self.bname], _REF)
            return st["planes"], branch_rate_bits(model, st["bl"], bins)
        if self.sname == "h_mu":
            mu = predict_mu(model, branch, pt.z_hat[self.bname], _REF)
            bl = BranchLatents(
                z_hat=pt.z_hat[self.bname], r=residual_symbols(pt.y_g[self.bname], mu)
            )
            planes = synthesize_branch(model, self.bname, bl, rp, _REF, mu=mu)
            return planes, branch_rate_bits(model, bl, st["bins"])
        planes = synthesize_branch(model, self.bname, None, rp, _REF, yhat=st["yhat"])
        return planes, st["bits"]

    def score(self) -> float:
        """Mean mixed BD-rate against the anchor curves.

        Images whose anchor curve cannot support a fit are skipped (they
        cannot differentiate candidates); a candidate that degenerates a
        fit-worthy image's curve scores +inf."""
        total = 0.0
        contributions = 0
        for idx in range(len(self.calib.images)):
            needed = [
                m
                for m in ("ms_ssim", "yuv_psnr")
                if self.calib.anchor_valid.get((idx, m), True)
            ]
            if not needed:
                continue
            img = self.calib.images[idx]
            samples = []
            for rp in self.calib.rate_points:
                planes, bits = self._branch_point(idx, rp)
                o_planes, o_bits = self.static[(idx, rp)]["other"]
                if self.bname == "y":
                    yp, up, vp = planes[0], o_planes[0], o_planes[1]
                else:
                    yp, up, vp = o_planes[0], planes[0], planes[1]
                bpp = (bits + o_bits) / self.calib.points[(idx, rp)].pixels
                samples.append(_point_metrics(img, yp, up, vp, bpp))
            cur = _curves_from_samples(samples)
            for m in needed:
                try:
                    total += bd_rate(self.calib.anchor_curves[idx][m], cur[m])
                except DegenerateCurveError:
                    total += math.inf
                contributions += 1
        if contributions == 0:
            return 0.0
        return total / contributions


def calibrate_activation_spec(
    model: ModelGraph,
    calib: CalibrationSet,
    bname: str,
    sname: str,
    slot_idx: int,
    in_spec: ActSpec,
    weight_bits: int,
    grid,
    k_cap: int,
) -> tuple[ActSpec, QConvLayer]:
    """Pick the grid spec minimizing the mean mixed BD-rate when this layer
    is quantized (earlier layers already are, later layers still float)."""
    subnet = model.branches[bname].subnets[sname]
    float_layer = subnet.slots[slot_idx]
    search = _LayerSearch(model, calib, bname, sname)
    best = None
    for spec in _grid_order(grid):
        try:
            qlayer = quantize_layer(float_layer, weight_bits, in_spec, spec, k_cap=k_cap)
        except InfeasibleChannelError:
            continue
        subnet.slots[slot_idx] = qlayer
        if sname == "h_sigma" and slot_idx == len(subnet.slots) - 1:
            saved_scale = model.branches[bname].sigma_scale_exp
            model.branches[bname].sigma_scale_exp = spec.scale_exp
        else:
            saved_scale = None
        try:
            score = search.score()
        finally:
            subnet.slots[slot_idx] = float_layer
            if saved_scale is not None:
                model.branches[bname].sigma_scale_exp = saved_scale
        if best is None or score < best[0]:
            best = (score, spec, qlayer)
    if best is None:
        raise InfeasibleChannelError(
            f"{bname}.{sname}.{slot_idx}: no grid spec is feasible"
        )
    return best[1], best[2]


def _quantize_subnet(
    model: ModelGraph,
    calib: CalibrationSet,
    bname: str,
    sname: str,
    weight_bits: int,
    grid,
    k_cap: int,
    allow_unchained: bool = False,
):
    branch = model.branches[bname]
    subnet = branch.subnets[sname]
    if sname == "g_s":
        mu_final = branch.subnets["h_mu"].slots[-1]
        if isinstance(mu_final, QConvLayer):
            chain = mu_final.out_spec
        elif allow_unchained:
            # Test-only forbidden ordering: no h_mu spec exists yet, so the
            # latent spec falls back to a safe default (the resulting model
            # demonstrates order sensitivity; it is not decodable).
            chain = ActSpec(8, 32767)
        else:
            raise InfeasibleChannelError(
                "g_s quantization requires a quantized h_mu (fixed step order)"
            )
    else:
        chain = Z_SPEC
    # The latent spec is a shared boundary: whichever of h_mu/g_s is
    # quantized second must honor the spec the other already fixed.
    boundary = None
    if sname == "h_mu":
        gs_first = branch.subnets["g_s"].slots[0]
        if isinstance(gs_first, QConvLayer):
            boundary = gs_first.in_spec
    block_entry = None
    last_idx = len(subnet.slots) - 1
    for slot_idx, role in _subnet_walk(subnet):
        float_layer = subnet.slots[slot_idx]
        if role == "res_first":
            block_entry = chain
        pinned = None
        if role == "res_second":
            pinned = block_entry
        elif sname == "g_s" and slot_idx == last_idx:
            pinned = PIXEL_SPEC
        elif boundary is not None and slot_idx == last_idx:
            pinned = boundary
        if pinned is not None:
            qlayer = quantize_layer(float_layer, weight_bits, chain, pinned, k_cap=k_cap)
            spec = pinned
        else:
            spec, qlayer = calibrate_activation_spec(
                model, calib, bname, sname, slot_idx, chain, weight_bits, grid, k_cap
            )
        subnet.slots[slot_idx] = qlayer
        # A residual block's output returns to its entry spec; every other
        # node hands its own output spec to the next layer.
        chain = block_entry if role == "res_second" else spec
        if sname == "h_sigma" and slot_idx == last_idx:
            branch.sigma_scale_exp = spec.scale_exp


def quantize_decoder_pipeline(
    model: ModelGraph,
    calib: CalibrationSet,
    config: QuantConfig,
    step_order=None,
) -> tuple[ModelGraph, list]:
    """Quantize decoder subnets sequentially (h_sigma, then h_mu, then g_s)
    with per-step BD-rate report rows.  The input model is left untouched;
    `step_order` exists only so tests can demonstrate order sensitivity."""
    order = tuple(step_order or config.steps)
    allow_unchained = step_order is not None
    out = copy.deepcopy(model)
    rows = []
    for step in order:
        bits = config.weight_bits.get(step, 8)
        for bname in ("y", "uv"):
            _quantize_subnet(
                out, calib, bname, step, bits, config.grid, config.k_cap,
                allow_unchained=allow_unchained,
            )
        state = out.quant_state()
        row = {
            "step": step,
            "h_sigma": f"int{state['h_sigma']}" if state["h_sigma"] else "-",
            "h_mu": f"int{state['h_mu']}" if state["h_mu"] else "-",
            "g_s": f"int{state['g_s']}" if state["g_s"] else "-",
        }
        row.update(evaluate_bd(out, calib))
        rows.append(row)
    audit_certificates(out)
    out.meta = dict(out.meta)
    out.meta["quantized"] = {
        "steps": list(order),
        "weight_bits": {k: int(v) for k, v in config.weight_bits.items()},
        "fixed_clip_mode": bool(config.fixed_clip_mode),
    }
    return out, rows


def audit_certificates(model: ModelGraph):
    """Witness-check every quantized layer; a violation here is a
    build-stopping bug, never an expected runtime condition."""
    for bname, branch in model.branches.items():
        for sname, subnet in branch.subnets.items():
            for i, slot in enumerate(subnet.slots):
                if isinstance(slot, QConvLayer):
                    report = overflow_witness_check(slot)
                    if not report.ok:
                        raise CertificateError(
                            f"{bname}.{sname}.{i}: witness exceeds the accumulator"
                        )
