"""Deterministic fixture models for the test and verification harness.

Weights come from a fixed PRNG (numpy PCG64, seed recorded in the model
metadata) around a hand-built approximate-identity path: channel 0 carries
a box-filtered copy of the input through the autoencoder, so reconstruction
error decreases monotonically with the gain vector and the RD machinery
sees well-behaved curves without any training.

The adversarial variant duplicates one pair of channels ahead of the final
synthesis layer and gives that layer a cancelling pair of huge weights
(+A/-A): the mathematical contribution is exactly zero, but float32
accumulation order leaves a rounding residue of a few pixel levels, which
is what distinguishes the float accumulation backends.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .entropy import build_entropy_tables
from .model import GAIN_EXP, Branch, ModelGraph, Subnet
from .tensor import ConvGeometry, FloatConvLayer

ACT = 3  # LeakyReLU slope 2**-3 everywhere

ADVERSARIAL_AMP = float(2**21)  # exact in float32

_CHANNELS = {
    # in, c1, c2, latent, hyper, z
    "y": (1, 12, 16, 24, 16, 12),
    "uv": (2, 10, 12, 16, 12, 8),
}

GAIN_BASES = (0.7, 1.0, 1.45, 2.1)
DERIVED_GAIN_FACTOR = 1.4


def _conv(rng, in_ch, out_ch, kernel, stride, padding, kind="conv", act=ACT):
    fan_in = in_ch * kernel * kernel
    w = rng.normal(0.0, 0.5 / np.sqrt(fan_in), size=(out_ch, in_ch, kernel, kernel))
    b = rng.normal(0.0, 0.05, size=out_ch)
    return FloatConvLayer(
        geometry=ConvGeometry(kind, stride, padding),
        weights=w.astype(np.float32),
        bias=b.astype(np.float32),
        act_shift=act,
    )


def _route(layer, pairs, taps, gain, rng, crosstalk):
    """Give (out_ch, in_ch) pairs an exact tap pattern and silence the rest
    of those output rows, so the identity path stays clean end to end.

    `taps` is a list of (kh, kw) positions, each set to `gain`.  With k4/s2/p1
    geometry, tap (1,1) subsamples without edge loss in a conv, and the
    2x2 block (1..2, 1..2) is nearest-neighbor upsampling in a tconv: every
    output pixel receives exactly one contribution, border included.
    """
    for oc, ic in pairs:
        layer.weights[oc] = rng.normal(0.0, crosstalk, size=layer.weights[oc].shape)
        for kh, kw in taps:
            layer.weights[oc, ic, kh, kw] = gain
        layer.bias[oc] = 0.0


_SUBSAMPLE_TAP = [(1, 1)]
_NN_UP_TAPS = [(1, 1), (1, 2), (2, 1), (2, 2)]


def _make_branch(rng, name: str, num_rate_points: int, adversarial: bool) -> Branch:
    in_ch, c1, c2, cy, ch, cz = _CHANNELS[name]
    idpairs1 = [(i, i) for i in range(in_ch)]

    # Analysis transform: three stride-2 stages; channel i carries an exact
    # subsample of input plane i (single-tap routes avoid border mass loss,
    # and the identity layers stay linear so the path inverts exactly).
    ga0 = _conv(rng, in_ch, c1, 4, 2, 1, act=None)
    _route(ga0, idpairs1, _SUBSAMPLE_TAP, 1.0, rng, 0.005)
    ga1 = _conv(rng, c1, c2, 4, 2, 1, act=None)
    _route(ga1, idpairs1, _SUBSAMPLE_TAP, 1.0, rng, 0.005)
    ga2 = _conv(rng, c2, cy, 4, 2, 1, act=None)
    _route(ga2, idpairs1, _SUBSAMPLE_TAP, 1.0, rng, 0.005)
    g_a = Subnet("g_a", [("conv", 0), ("conv", 1), ("conv", 2)], [ga0, ga1, ga2])

    # Hyper encoder: one resolution halving.
    ha0 = _conv(rng, cy, ch, 3, 1, 1)
    ha1 = _conv(rng, ch, cz, 4, 2, 1, act=None)
    h_a = Subnet("h_a", [("conv", 0), ("conv", 1)], [ha0, ha1])

    # Hyper decoders: 2-layer stacks back to latent resolution.
    hm0 = _conv(rng, cz, ch, 4, 2, 1, kind="tconv")
    hm1 = _conv(rng, ch, cy, 3, 1, 1, act=None)
    hm1.bias[:] = rng.normal(0.0, 0.02, size=cy)
    h_mu = Subnet("h_mu", [("conv", 0), ("conv", 1)], [hm0, hm1])

    hs0 = _conv(rng, cz, ch, 4, 2, 1, kind="tconv")
    hs1 = _conv(rng, ch, cy, 3, 1, 1, act=None)
    # Scale predictions should land mid-grid among the entropy bins.
    hs1.bias[:] = (0.9 + 0.1 * rng.uniform(-1.0, 1.0, size=cy)).astype(np.float32)
    hs1.weights *= 0.3
    h_sigma = Subnet("h_sigma", [("conv", 0), ("conv", 1)], [hs0, hs1])

    # Synthesis transform: mirror with residual blocks; identity channels
    # upsample by pixel replication, the final stage rescales to pixel
    # range (x64).  Bit-shift LeakyReLU lives in the residual branches.
    gs0 = _conv(rng, cy, c2, 4, 2, 1, kind="tconv", act=None)
    _route(gs0, idpairs1, _NN_UP_TAPS, 1.0, rng, 0.005)
    r1a = _conv(rng, c2, c2, 3, 1, 1)
    r1b = _conv(rng, c2, c2, 3, 1, 1, act=None)
    r1b.weights *= 0.3
    _route(r1b, idpairs1, [], 0.0, rng, 0.0015)
    gs1 = _conv(rng, c2, c1, 4, 2, 1, kind="tconv", act=None)
    _route(gs1, idpairs1, _NN_UP_TAPS, 1.0, rng, 0.005)
    r2a = _conv(rng, c1, c1, 3, 1, 1)
    r2b = _conv(rng, c1, c1, 3, 1, 1, act=None)
    r2b.weights *= 0.3
    _route(r2b, idpairs1, [], 0.0, rng, 0.0015)
    gs2 = _conv(rng, c1, in_ch, 4, 2, 1, kind="tconv", act=None)
    gs2.weights *= 0.05
    _route(gs2, idpairs1, _NN_UP_TAPS, 64.0, rng, 0.01)

    if adversarial and name == "y":
        # Channels 2 and 3 become bitwise-identical from gs1 onward...
        for lay in (gs1, r2a, r2b):
            lay.weights[3] = lay.weights[2]
            lay.bias[3] = lay.bias[2]
        # ...so +A/-A taps cancel exactly in value, but not in float32
        # rounding, whose residue depends on the accumulation order.
        gs2.weights[0, 2, :, :] = ADVERSARIAL_AMP
        gs2.weights[0, 3, :, :] = -ADVERSARIAL_AMP

    g_s = Subnet(
        "g_s",
        [("conv", 0), ("res", 1, 2), ("conv", 3), ("res", 4, 5), ("conv", 6)],
        [gs0, r1a, r1b, gs1, r2a, r2b, gs2],
    )

    jitter = 1.0 + 0.08 * rng.uniform(-1.0, 1.0, size=(len(GAIN_BASES), cy))
    gain = np.asarray(GAIN_BASES)[:, None] * jitter
    derived = gain[-1:] * DERIVED_GAIN_FACTOR
    gain = np.concatenate([gain, derived]).astype(np.float32)
    inv_gain = np.sign(gain) * np.floor(np.abs((1 << GAIN_EXP) / gain.astype(np.float64)) + 0.5)

    return Branch(
        name=name,
        in_channels=in_ch,
        subnets={"g_a": g_a, "h_a": h_a, "h_mu": h_mu, "h_sigma": h_sigma, "g_s": g_s},
        gain=gain,
        inv_gain=inv_gain.astype(np.int64),
        sigma_scale_exp=8,
    )


def make_fixture_model(seed: int, adversarial: bool = False) -> ModelGraph:
    """Deterministic float model at the desk-scale topology; identical seed
    produces identical files byte for byte."""
    rng = np.random.default_rng(seed)
    num_rp = len(GAIN_BASES) + 1
    branches = {
        "y": _make_branch(rng, "y", num_rp, adversarial),
        "uv": _make_branch(rng, "uv", num_rp, adversarial),
    }
    tag = f"qcodec-fixture-{seed}-{int(adversarial)}"
    model_id = hashlib.sha256(tag.encode()).hexdigest()[:16]
    return ModelGraph(
        model_id=model_id,
        branches=branches,
        tables=build_entropy_tables(),
        gain_exp=GAIN_EXP,
        num_rate_points=num_rp,
        derived_rate_points=(num_rp - 1,),
        meta={
            "creator": "fixture",
            "seed": int(seed),
            "prng": "numpy-pcg64",
            "adversarial": bool(adversarial),
        },
    )
