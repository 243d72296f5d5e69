"""Codec model structure and its on-disk format.

A model is a JSON manifest plus a little-endian binary blob of tensors.
Weights are (out, in, kh, kw) row-major: float32 for float subnets,
int8/int16 weights with int32 biases for quantized ones.  Entropy tables
are embedded in the blob verbatim with a content digest, so a model file
fully determines decoder behavior.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .entropy import NUM_BINS, NUM_SYMBOLS, EntropyTables
from .errors import CertificateError, ModelFormatError
from .tensor import ActSpec, ConvGeometry, FloatConvLayer, QConvLayer

FORMAT_NAME = "qcodec-model-v1"
DOWNSAMPLE = 32  # luma dims must pad to this multiple
GAIN_EXP = 13  # inverse-gain vectors are 16-bit with this exponent

SUBNET_NAMES = ("g_a", "h_a", "h_sigma", "h_mu", "g_s")
DECODER_SUBNETS = ("h_sigma", "h_mu", "g_s")

_DTYPES = {"f32": "<f4", "i8": "<i1", "i16": "<i2", "i32": "<i4", "u32": "<u4"}


@dataclass
class Subnet:
    """A conv stack with optional residual blocks.

    `nodes` is the execution order: ("conv", i) applies slot i,
    ("res", i, j) applies slots i then j around a saturating skip.
    `slots` holds FloatConvLayer or QConvLayer values (a quantized model
    replaces the float layer in place).
    """

    name: str
    nodes: list
    slots: list

    def conv_count(self) -> int:
        return len(self.slots)

    def is_quantized(self) -> bool:
        return all(isinstance(s, QConvLayer) for s in self.slots)

    def final_layer(self):
        return self.slots[-1]

    def slot_roles(self):
        """Per-slot (pinned_to_block_input, block_input_slot) map used by
        the quantizer: the second conv of a residual block must requantize
        back to the block's input spec."""
        roles = {}
        for node in self.nodes:
            if node[0] == "res":
                roles[node[1]] = ("res_first", None)
                roles[node[2]] = ("res_second", node[1])
        return roles


@dataclass
class Branch:
    """One color branch (luma or half-resolution chroma pair)."""

    name: str
    in_channels: int
    subnets: dict  # name -> Subnet
    gain: np.ndarray  # (rate_points, latent_ch) float32
    inv_gain: np.ndarray  # (rate_points, latent_ch) int64, 16-bit values
    sigma_scale_exp: int = 8

    def __post_init__(self):
        self.gain = np.ascontiguousarray(self.gain, dtype=np.float32)
        self.inv_gain = np.ascontiguousarray(self.inv_gain, dtype=np.int64)
        if self.gain.shape != self.inv_gain.shape:
            raise ValueError("gain and inverse-gain shapes differ")
        if (self.gain <= 0).any():
            raise ValueError("gain vectors must be positive")
        if np.abs(self.inv_gain).max() > (1 << 15) - 1:
            raise ValueError("inverse gain exceeds 16-bit range")

    @property
    def latent_channels(self) -> int:
        return self.gain.shape[1]

    @property
    def hyper_channels(self) -> int:
        return self.subnets["h_a"].final_layer().out_ch


@dataclass
class ModelGraph:
    """The five-subnetwork codec definition with per-rate-point gain and
    inverse-gain vectors (four trained points plus one derived)."""

    model_id: str
    branches: dict  # "y" | "uv" -> Branch
    tables: EntropyTables
    gain_exp: int = GAIN_EXP
    num_rate_points: int = 5
    derived_rate_points: tuple = (4,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.model_id) != 16:
            raise ValueError("model_id must be 16 hex chars")
        for br in self.branches.values():
            if br.gain.shape[0] != self.num_rate_points:
                raise ValueError("gain vectors must cover every rate point")
        trained = self.num_rate_points - len(self.derived_rate_points)
        if trained != 4:
            raise ValueError("expected exactly 4 trained rate points")

    def quant_state(self) -> dict:
        """Per decoder subnet: 'float', or the weight bit depth."""
        out = {}
        for name in DECODER_SUBNETS:
            sub = self.branches["y"].subnets[name]
            if sub.is_quantized():
                out[name] = max(s.weight_bits for s in sub.slots)
            else:
                out[name] = None
        return out


# --- serialization -----------------------------------------------------------


def _spec_to_json(spec: ActSpec) -> dict:
    return {"a": spec.scale_exp, "q": spec.clip_bound}


def _spec_from_json(d: dict) -> ActSpec:
    return ActSpec(int(d["a"]), int(d["q"]))


def _layer_to_json(name: str, layer, tensors: dict) -> dict:
    geo = layer.geometry
    kh = layer.weights.shape[2] if isinstance(layer, FloatConvLayer) else layer.q_weights.shape[2]
    desc = {
        "kind": geo.kind,
        "stride": geo.stride,
        "padding": geo.padding,
        "in_ch": layer.in_ch,
        "out_ch": layer.out_ch,
        "kernel": kh,
        "act_shift": layer.act_shift,
        "weight": f"{name}.w",
        "bias": f"{name}.b",
    }
    if isinstance(layer, QConvLayer):
        wdtype = "i8" if layer.weight_bits == 8 else "i16"
        desc.update(
            quantized=True,
            weight_bits=layer.weight_bits,
            k=layer.k.tolist(),
            in_spec=_spec_to_json(layer.in_spec),
            out_spec=_spec_to_json(layer.out_spec),
        )
        tensors[f"{name}.w"] = (wdtype, layer.q_weights)
        tensors[f"{name}.b"] = ("i32", layer.q_bias)
    else:
        desc["quantized"] = False
        tensors[f"{name}.w"] = ("f32", layer.weights)
        tensors[f"{name}.b"] = ("f32", layer.bias)
    return desc


def _layer_from_json(desc: dict, name: str, fetch) -> FloatConvLayer | QConvLayer:
    geo = ConvGeometry(desc["kind"], int(desc["stride"]), int(desc["padding"]))
    act = desc.get("act_shift")
    w = fetch(desc["weight"])
    b = fetch(desc["bias"])
    want = (desc["out_ch"], desc["in_ch"], desc["kernel"], desc["kernel"])
    if tuple(w.shape) != want:
        raise ModelFormatError(f"{name}: weight shape {w.shape} != {want}")
    if desc["quantized"]:
        return QConvLayer(
            geometry=geo,
            weight_bits=int(desc["weight_bits"]),
            q_weights=w,
            k=np.asarray(desc["k"], dtype=np.int64),
            q_bias=b,
            in_spec=_spec_from_json(desc["in_spec"]),
            out_spec=_spec_from_json(desc["out_spec"]),
            act_shift=act,
        )
    return FloatConvLayer(geometry=geo, weights=w, bias=b, act_shift=act)


def save_model(graph: ModelGraph, stem) -> tuple[Path, Path]:
    """Write `<stem>.json` + `<stem>.bin`; save/load round trips are
    byte-identical."""
    stem = Path(stem)
    tensors = {}
    branches_json = {}
    for bname, br in sorted(graph.branches.items()):
        subnets_json = {}
        for sname, sub in sorted(br.subnets.items()):
            layers = []
            for i, slot in enumerate(sub.slots):
                layers.append(_layer_to_json(f"{bname}.{sname}.{i}", slot, tensors))
            subnets_json[sname] = {"nodes": [list(n) for n in sub.nodes], "layers": layers}
        tensors[f"{bname}.gain"] = ("f32", br.gain)
        tensors[f"{bname}.inv_gain"] = ("i16", br.inv_gain)
        branches_json[bname] = {
            "in_channels": br.in_channels,
            "sigma_scale_exp": br.sigma_scale_exp,
            "subnets": subnets_json,
        }
    tensors["entropy.cdfs"] = ("u32", None)  # raw bytes handled below

    blob = bytearray()
    tensor_index = {}
    for tname in sorted(tensors):
        dtype, arr = tensors[tname]
        if tname == "entropy.cdfs":
            raw = graph.tables.to_bytes()
            shape = [NUM_BINS + 1, NUM_SYMBOLS + 1]
        else:
            raw = np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes()
            shape = list(arr.shape)
        tensor_index[tname] = {
            "dtype": dtype,
            "shape": shape,
            "offset": len(blob),
            "nbytes": len(raw),
        }
        blob.extend(raw)

    manifest = {
        "format": FORMAT_NAME,
        "model_id": graph.model_id,
        "meta": graph.meta,
        "downsample": DOWNSAMPLE,
        "gain_exp": graph.gain_exp,
        "num_rate_points": graph.num_rate_points,
        "derived_rate_points": list(graph.derived_rate_points),
        "entropy": {
            "num_bins": NUM_BINS,
            "sigmas": [float(s) for s in graph.tables.sigmas],
            "edges": [float(e) for e in graph.tables.edges],
            "digest": graph.tables.digest(),
        },
        "branches": branches_json,
        "blob": stem.name + ".bin",
        "blob_digest": "sha256:" + hashlib.sha256(bytes(blob)).hexdigest(),
        "tensors": tensor_index,
    }
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    bin_path.write_bytes(bytes(blob))
    return json_path, bin_path


def load_model(manifest_path) -> ModelGraph:
    """Load and validate a model: digests, shapes, and every quantized
    layer's no-overflow certificate."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"bad manifest JSON: {e}") from e
    if manifest.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"unknown format {manifest.get('format')!r}")
    if manifest.get("downsample") != DOWNSAMPLE:
        raise ModelFormatError("unsupported downsample factor")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    digest = "sha256:" + hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_digest"]:
        raise ModelFormatError("blob digest mismatch")

    index = manifest["tensors"]

    def fetch(tname):
        info = index[tname]
        raw = blob[info["offset"] : info["offset"] + info["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[info["dtype"]])
        return arr.reshape(info["shape"]).copy()

    ent = manifest["entropy"]
    info = index["entropy.cdfs"]
    tables = EntropyTables.from_bytes(
        blob[info["offset"] : info["offset"] + info["nbytes"]],
        sigmas=np.asarray(ent["sigmas"], dtype=np.float64),
        edges=np.asarray(ent["edges"], dtype=np.float64),
    )
    tables.validate()
    if tables.digest() != ent["digest"]:
        raise ModelFormatError("entropy table digest mismatch")

    branches = {}
    for bname, bjson in manifest["branches"].items():
        subnets = {}
        for sname, sjson in bjson["subnets"].items():
            slots = []
            for i, desc in enumerate(sjson["layers"]):
                lname = f"{bname}.{sname}.{i}"
                try:
                    slots.append(_layer_from_json(desc, lname, fetch))
                except CertificateError as e:
                    raise ModelFormatError(f"{lname}: certificate failed: {e}") from e
            nodes = [tuple(n) for n in sjson["nodes"]]
            subnets[sname] = Subnet(name=sname, nodes=nodes, slots=slots)
        missing = set(SUBNET_NAMES) - set(subnets)
        if missing:
            raise ModelFormatError(f"branch {bname} missing subnets {sorted(missing)}")
        branches[bname] = Branch(
            name=bname,
            in_channels=int(bjson["in_channels"]),
            subnets=subnets,
            gain=fetch(f"{bname}.gain"),
            inv_gain=fetch(f"{bname}.inv_gain").astype(np.int64),
            sigma_scale_exp=int(bjson["sigma_scale_exp"]),
        )

    return ModelGraph(
        model_id=manifest["model_id"],
        branches=branches,
        tables=tables,
        gain_exp=int(manifest["gain_exp"]),
        num_rate_points=int(manifest["num_rate_points"]),
        derived_rate_points=tuple(manifest["derived_rate_points"]),
        meta=manifest.get("meta", {}),
    )
