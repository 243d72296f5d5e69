"""Gain-vector derivation: identity behavior, fixed-point bounds, and the
variable-rate direction of the derived fifth point."""
import json

import numpy as np
import torch

from codectrainer.export import GAIN_EXP
from codectrainer.train import probe_rd


def test_identity_override_reproduces_rate_point_four(trained):
    codec = trained.codec
    ident = {}
    with torch.no_grad():
        for name in ("y", "uv"):
            br = codec.branch(name)
            ident[name] = (torch.exp(br.log_gain(3)), torch.exp(br.log_inv_gain(3)))
    base = probe_rd(codec, 3)
    overridden = probe_rd(codec, 3, gain_override=ident)
    assert overridden == base


def test_derived_vectors_are_positive_and_larger(trained, gain5):
    codec = trained.codec
    for name in ("y", "uv"):
        g5, ig5 = gain5[name]
        g4 = torch.exp(codec.branch(name).log_gain(3))
        assert (g5 > 0).all() and (ig5 > 0).all()
        assert (g5 > g4).all()


def test_fixed_point_export_round_trip_bound(trained, gain5, exported):
    manifest = json.loads(exported["manifest"].read_text())
    blob = exported["blob"].read_bytes()
    for bname in ("y", "uv"):
        br = trained.codec.branch(bname)
        with torch.no_grad():
            ig_float = np.stack(
                [torch.exp(br.log_inv_gain(t)).numpy() for t in range(4)]
                + [gain5[bname][1].numpy()]
            ).astype(np.float64)
        gi = manifest["tensors"][f"{bname}.inv_gain"]
        raw = blob[gi["offset"] : gi["offset"] + gi["nbytes"]]
        ig_int = np.frombuffer(raw, dtype="<i2").reshape(gi["shape"]).astype(np.float64)
        assert ig_int.min() >= 1 and ig_int.max() <= (1 << 15) - 1
        back = ig_int / (1 << GAIN_EXP)
        assert np.abs(back - ig_float).max() <= 2.0 ** -(GAIN_EXP + 1)


def test_fifth_point_exceeds_fourth_in_rate_and_quality(trained, gain5):
    bpp4, mse4 = probe_rd(trained.codec, 3)
    bpp5, mse5 = probe_rd(trained.codec, 3, gain_override=gain5)
    assert bpp5 > bpp4
    assert mse5 < mse4
