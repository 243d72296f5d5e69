"""Writer for the qcodec model interchange format (manifest JSON + blob).

This is the trainer's half of the file contract: float32 weights in
(out, in, kh, kw) layout, little-endian blob with a sorted-name tensor
index, sha256 digests, and the frozen entropy tables (64 log-spaced scale
bins over symbols [-255, 255] with a 16-bit total, minimum frequency 1).
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch

from .net import ACT_SHIFT, CHANNELS, SIGMA_MAX, SIGMA_MIN, Z_SIGMA, ToyCodec

FORMAT_NAME = "qcodec-model-v1"
DOWNSAMPLE = 32
GAIN_EXP = 13
NUM_BINS = 64
SYMBOL_BOUND = 255
NUM_SYMBOLS = 2 * SYMBOL_BOUND + 1
TOTAL = 1 << 16
SIGMA_SCALE_EXP = 8  # float-model default for the sigma bin comparisons


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def gaussian_freqs(sigma: float) -> np.ndarray:
    """Clamp-normalized Gaussian cell masses as integer frequencies with a
    16-bit total and minimum 1 per symbol (the format's table rule)."""
    probs = np.empty(NUM_SYMBOLS, dtype=np.float64)
    for i, s in enumerate(range(-SYMBOL_BOUND, SYMBOL_BOUND + 1)):
        probs[i] = max(_phi((s + 0.5) / sigma) - _phi((s - 0.5) / sigma), 0.0)
    budget = TOTAL - NUM_SYMBOLS
    raw = probs * (budget / probs.sum())
    base = np.floor(raw).astype(np.int64)
    short = budget - int(base.sum())
    order = np.lexsort((np.arange(NUM_SYMBOLS), -(raw - base)))
    base[order[:short]] += 1
    return base + 1


def build_tables():
    sigmas = np.exp(np.linspace(math.log(SIGMA_MIN), math.log(SIGMA_MAX), NUM_BINS))
    edges = np.sqrt(sigmas[:-1] * sigmas[1:])
    cdfs = []
    for s in list(sigmas) + [Z_SIGMA]:
        f = gaussian_freqs(float(s))
        cdf = np.zeros(NUM_SYMBOLS + 1, dtype=np.int64)
        np.cumsum(f, out=cdf[1:])
        cdfs.append(cdf)
    payload = np.stack(cdfs).astype("<u4").tobytes()
    return sigmas, edges, payload


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def _conv_desc(name, layer, act, tensors, kind):
    w = layer.weight.detach().numpy().astype(np.float32)
    if kind == "tconv":
        w = np.ascontiguousarray(np.transpose(w, (1, 0, 2, 3)))
    b = layer.bias.detach().numpy().astype(np.float32)
    tensors[f"{name}.w"] = ("f32", w)
    tensors[f"{name}.b"] = ("f32", b)
    return {
        "kind": kind,
        "stride": layer.stride[0],
        "padding": layer.padding[0],
        "in_ch": w.shape[1],
        "out_ch": w.shape[0],
        "kernel": w.shape[2],
        "act_shift": act,
        "weight": f"{name}.w",
        "bias": f"{name}.b",
        "quantized": False,
    }


def _branch_json(bname, branch, gain5, tensors):
    ig5: torch.Tensor
    gain5_b, ig5 = gain5[bname]
    p = f"{bname}"
    subnets = {}

    ga = branch.g_a.net
    subnets["g_a"] = {
        "nodes": [["conv", 0], ["conv", 1], ["conv", 2]],
        "layers": [
            _conv_desc(f"{p}.g_a.0", ga[0], ACT_SHIFT, tensors, "conv"),
            _conv_desc(f"{p}.g_a.1", ga[2], ACT_SHIFT, tensors, "conv"),
            _conv_desc(f"{p}.g_a.2", ga[4], None, tensors, "conv"),
        ],
    }
    ha = branch.h_a.net
    subnets["h_a"] = {
        "nodes": [["conv", 0], ["conv", 1]],
        "layers": [
            _conv_desc(f"{p}.h_a.0", ha[0], ACT_SHIFT, tensors, "conv"),
            _conv_desc(f"{p}.h_a.1", ha[2], None, tensors, "conv"),
        ],
    }
    for sname, mod in (("h_mu", branch.h_mu), ("h_sigma", branch.h_sigma)):
        subnets[sname] = {
            "nodes": [["conv", 0], ["conv", 1]],
            "layers": [
                _conv_desc(f"{p}.{sname}.0", mod.up, ACT_SHIFT, tensors, "tconv"),
                _conv_desc(f"{p}.{sname}.1", mod.out, None, tensors, "conv"),
            ],
        }
    gs = branch.g_s
    subnets["g_s"] = {
        "nodes": [["conv", 0], ["res", 1, 2], ["conv", 3], ["res", 4, 5], ["conv", 6]],
        "layers": [
            _conv_desc(f"{p}.g_s.0", gs.up0, ACT_SHIFT, tensors, "tconv"),
            _conv_desc(f"{p}.g_s.1", gs.res0.c1, ACT_SHIFT, tensors, "conv"),
            _conv_desc(f"{p}.g_s.2", gs.res0.c2, None, tensors, "conv"),
            _conv_desc(f"{p}.g_s.3", gs.up1, ACT_SHIFT, tensors, "tconv"),
            _conv_desc(f"{p}.g_s.4", gs.res1.c1, ACT_SHIFT, tensors, "conv"),
            _conv_desc(f"{p}.g_s.5", gs.res1.c2, None, tensors, "conv"),
            _conv_desc(f"{p}.g_s.6", gs.up2, None, tensors, "tconv"),
        ],
    }
    # The deployed decoder emits centered pixels; training ran in the
    # normalized domain, and the final layer is linear, so fold the x64
    # rescale into its parameters exactly.
    w6 = tensors[f"{p}.g_s.6.w"][1] * np.float32(64.0)
    b6 = tensors[f"{p}.g_s.6.b"][1] * np.float32(64.0)
    tensors[f"{p}.g_s.6.w"] = ("f32", w6)
    tensors[f"{p}.g_s.6.b"] = ("f32", b6)

    with torch.no_grad():
        trained = range(branch.log_base.shape[0])
        gain = np.stack([torch.exp(branch.log_gain(t)).numpy() for t in trained])
        ig = np.stack([torch.exp(branch.log_inv_gain(t)).numpy() for t in trained])
    gain = np.concatenate([gain, gain5_b.numpy()[None]]).astype(np.float32)
    ig = np.concatenate([ig, ig5.numpy()[None]]).astype(np.float64)
    ig_int = _round_half_away(ig * float(1 << GAIN_EXP))
    if ig_int.max() > (1 << 15) - 1 or ig_int.min() < 1:
        raise ValueError("inverse-gain vector leaves the 16-bit fixed-point range")
    tensors[f"{p}.gain"] = ("f32", gain)
    tensors[f"{p}.inv_gain"] = ("i16", ig_int.astype(np.int16))
    return {
        "in_channels": CHANNELS[bname][0],
        "sigma_scale_exp": SIGMA_SCALE_EXP,
        "subnets": subnets,
    }


_DTYPES = {"f32": "<f4", "i16": "<i2", "u32": "<u4"}


def export(codec: ToyCodec, stem, gain5: dict, spec=None):
    """Write `<stem>.json` + `<stem>.bin` plus a fixtures.lock recording the
    seed and content hashes; re-export is byte-identical."""
    stem = Path(stem)
    tensors = {}
    branches = {
        "y": _branch_json("y", codec.y, gain5, tensors),
        "uv": _branch_json("uv", codec.uv, gain5, tensors),
    }
    sigmas, edges, table_payload = build_tables()
    tensors["entropy.cdfs"] = ("u32", None)

    blob = bytearray()
    index = {}
    for name in sorted(tensors):
        dtype, arr = tensors[name]
        if name == "entropy.cdfs":
            raw = table_payload
            shape = [NUM_BINS + 1, NUM_SYMBOLS + 1]
        else:
            raw = np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes()
            shape = list(arr.shape)
        index[name] = {
            "dtype": dtype,
            "shape": shape,
            "offset": len(blob),
            "nbytes": len(raw),
        }
        blob.extend(raw)

    seed = spec.seed if spec is not None else 0
    model_id = hashlib.sha256(f"codectrainer-{seed}".encode()).hexdigest()[:16]
    manifest = {
        "format": FORMAT_NAME,
        "model_id": model_id,
        "meta": {
            "creator": "trainer",
            "seed": int(seed),
            "prng": "torch-manual-seed",
            "lambdas": list(spec.lambdas) if spec is not None else [],
            "steps": int(spec.steps) if spec is not None else 0,
            "torch": torch.__version__,
        },
        "downsample": DOWNSAMPLE,
        "gain_exp": GAIN_EXP,
        "num_rate_points": 5,
        "derived_rate_points": [4],
        "entropy": {
            "num_bins": NUM_BINS,
            "sigmas": [float(s) for s in sigmas],
            "edges": [float(e) for e in edges],
            "digest": "sha256:" + hashlib.sha256(table_payload).hexdigest(),
        },
        "branches": branches,
        "blob": stem.name + ".bin",
        "blob_digest": "sha256:" + hashlib.sha256(bytes(blob)).hexdigest(),
        "tensors": index,
    }
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    bin_path.write_bytes(bytes(blob))
    lock = {
        "seed": int(seed),
        "manifest_sha256": hashlib.sha256(json_path.read_bytes()).hexdigest(),
        "blob_sha256": hashlib.sha256(bin_path.read_bytes()).hexdigest(),
        "torch": torch.__version__,
    }
    (stem.parent / "fixtures.lock").write_text(json.dumps(lock, indent=1) + "\n")
    return json_path, bin_path
