"""Acceptance suite: every criterion at its stated tolerance, one printed
pass/fail line each (run with `pytest -s tests/test_acceptance.py -v`)."""
import itertools
import time

import numpy as np
import pytest

from qcodec.codec import BACKENDS, decode, encode
from qcodec.entropy import (
    NUM_SYMBOLS,
    build_entropy_tables,
    estimate_rate_bits,
    range_decode,
    range_encode,
)
from qcodec.imageio import YuvImage
from qcodec.metrics import RDCurve, bd_rate, mixed_bd_rate, mse_enc_dec
from qcodec.pipeline import CalibrationSet, quantize_decoder_pipeline
from qcodec.quantize import (
    ACC_LIMIT,
    QuantConfig,
    max_safe_exponent,
    overflow_witness_check,
    quantize_channel_16,
    quantize_channel_8_search,
)
from qcodec.tensor import ActSpec, QConvLayer

from conftest import SMALL_GRID, blocky_image
from oracles import oracle_8bit_argmin, trapezoid_bd_rate


def report(criterion: str, ok: bool, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


@pytest.fixture(scope="module")
def verify_images():
    sizes = [(64, 64), (64, 64), (64, 64), (64, 96), (96, 64), (128, 128), (192, 256), (320, 448)]
    return [blocky_image(40 + i, h, w) for i, (h, w) in enumerate(sizes)]


@pytest.fixture(scope="module")
def partial_models(adv_model):
    """Adversarial fixture with h_sigma, then h_sigma+h_mu quantized
    (g_s stays float in both)."""
    images = [blocky_image(s, 64, 64) for s in (0, 1)]
    calib = CalibrationSet.prepare(adv_model, images)
    out = {}
    for steps in (("h_sigma",), ("h_sigma", "h_mu")):
        cfg = QuantConfig(
            weight_bits={"h_sigma": 8, "h_mu": 16, "g_s": 16},
            grid=SMALL_GRID,
            steps=steps,
        )
        out[steps], _ = quantize_decoder_pipeline(adv_model, calib, cfg)
    return out


class TestBitExactness:
    def test_all_backend_pairs_zero_deviation(self, quantized_model, verify_images):
        t0 = time.time()
        names = sorted(BACKENDS)
        rate_point = 2
        worst = 0.0
        mismatches = 0
        pairs = 0
        for img in verify_images:
            encs = {a: encode(img, quantized_model, rate_point, BACKENDS[a]) for a in names}
            for a, b in itertools.product(names, names):
                rec = decode(encs[a].bitstream.data, quantized_model, BACKENDS[b])
                worst = max(worst, mse_enc_dec(encs[a].enc_rec, rec))
                mismatches += rec.digest() != encs[a].enc_rec.digest()
                pairs += 1
        elapsed = time.time() - t0
        report(
            "bit-exactness (fully quantized decoder)",
            worst == 0.0 and mismatches == 0 and elapsed < 120.0,
            f"{len(verify_images)} images x {pairs // len(verify_images)} ordered pairs, "
            f"max MSE_enc_dec={worst}, hash mismatches={mismatches}, {elapsed:.1f}s (<120s)",
        )


class TestPartialQuantizationDeviation:
    @pytest.mark.parametrize("steps", [("h_sigma",), ("h_sigma", "h_mu")])
    def test_float_synthesis_orders_leave_residual(self, partial_models, steps):
        model = partial_models[steps]
        state = model.quant_state()
        assert state["g_s"] is None
        names = sorted(BACKENDS)
        img = blocky_image(60, 96, 64)
        encs = {a: encode(img, model, 2, BACKENDS[a]) for a in names}
        positive = []
        for a, b in itertools.product(names, names):
            rec = decode(encs[a].bitstream.data, model, BACKENDS[b])
            m = mse_enc_dec(encs[a].enc_rec, rec)
            if a == b:
                assert m == 0.0
            elif m > 0:
                positive.append((a, b, m))
        label = "+".join(s for s in steps)
        report(
            f"partial quantization residual ({label} quantized, float g_s)",
            len(positive) > 0,
            f"{len(positive)} ordered pairs with MSE_enc_dec > 0, e.g. {positive[:1]}",
        )


class TestNoOverflowCertificate:
    def test_witness_and_random_inputs_on_pipeline_output(self, quantized_model):
        rng = np.random.default_rng(99)
        layers = 0
        min_headroom = ACC_LIMIT
        for br in quantized_model.branches.values():
            for name in ("h_sigma", "h_mu", "g_s"):
                for slot in br.subnets[name].slots:
                    assert isinstance(slot, QConvLayer)
                    witness = overflow_witness_check(slot)
                    assert witness.ok
                    min_headroom = min(min_headroom, min(witness.headroom))
                    q = slot.in_spec.clip_bound
                    flat = slot.q_weights.reshape(slot.out_ch, -1)
                    xs = rng.integers(-q, q + 1, size=(1000, flat.shape[1]))
                    accs = xs @ flat.T + slot.q_bias[None, :]
                    assert int(np.abs(accs).max()) <= ACC_LIMIT
                    layers += 1
        report(
            "no-overflow certificate (witness + 1000 random inputs/layer)",
            layers == 22 and min_headroom >= 0,
            f"{layers} layers, min headroom {min_headroom}",
        )

    def test_worked_examples_match_wide_integer_oracle(self):
        spec = ActSpec(scale_exp=8, clip_bound=32767)
        res15 = quantize_channel_16([0.5, -0.25], 0.0, spec)
        acc15 = sum(abs(int(qq)) * 32767 for qq in res15.q_weights)
        k10 = max_safe_exponent([0.9] * 64, 0.0, spec, 16)
        q10 = int(round(0.9 * (1 << k10)))
        acc10 = 64 * q10 * 32767
        ok = (
            res15.k == 15
            and acc15 == 805281792
            and acc15 <= ACC_LIMIT
            and k10 == 10
            and acc10 == 1933515136
            and acc10 <= ACC_LIMIT
            and 64 * round(0.9 * 2048) * 32767 > ACC_LIMIT
        )
        report(
            "no-overflow worked examples (k=15 and k=10 channels)",
            ok,
            f"k15 acc={acc15}, k10 acc={acc10}, both <= {ACC_LIMIT}",
        )


class TestEightBitSearchOptimality:
    def test_matches_exhaustive_argmin_on_1000_random_channels(self):
        rng = np.random.default_rng(12345)
        spec = ActSpec(scale_exp=8, clip_bound=32767)
        mismatches = 0
        for _ in range(1000):
            n = int(rng.integers(1, 10))
            w = (rng.standard_normal(n) * 10.0 ** float(rng.integers(-2, 2))).tolist()
            b = float(rng.standard_normal() * 0.5)
            got = quantize_channel_8_search(w, b, spec).k
            want = oracle_8bit_argmin(w, b, spec)
            mismatches += got != want
        report(
            "8-bit exponent search optimality (1000 random channels)",
            mismatches == 0,
            f"{mismatches} argmin mismatches (tolerance: exact index match)",
        )


class TestBdRateOracle:
    def test_identity_doubled_and_integration_oracle(self):
        anchor = RDCurve([(0.25, 30.0), (0.5, 34.0), (1.0, 38.5), (2.0, 44.0)])
        doubled = RDCurve([(r * 2, q) for r, q in anchor.points])
        ident = abs(bd_rate(anchor, anchor))
        dbl = bd_rate(anchor, doubled)
        a2 = RDCurve([(0.21, 29.5), (0.47, 33.8), (0.98, 38.1), (1.9, 43.2)])
        t2 = RDCurve([(0.26, 29.9), (0.55, 33.4), (1.2, 38.9), (2.3, 42.8)])
        got = bd_rate(a2, t2)
        want = trapezoid_bd_rate(a2, t2)
        ok = ident < 1e-9 and abs(dbl - 100.0) < 1e-6 and abs(got - want) < 0.01
        report(
            "BD-rate oracle (identity, doubled-rate, numeric integration)",
            ok,
            f"|identity|={ident:.2e} (<1e-9), doubled={dbl:.8f} (100 +/- 1e-6), "
            f"fit-vs-trapezoid diff={abs(got - want):.2e} pp (<0.01)",
        )


class TestMixedArithmetics:
    def test_mixed_and_msedec_values(self):
        mixed = mixed_bd_rate(0.78, 0.46)
        y = np.zeros((8, 8), dtype=np.uint8)
        a = YuvImage(y, np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8))
        b = YuvImage(y.copy(), a.u.copy(), a.v.copy())
        zero = mse_enc_dec(a, b)
        y2 = y.copy()
        y2[0, 0] = 2
        c = YuvImage(y2, a.u.copy(), a.v.copy())
        single = mse_enc_dec(a, c)
        d = YuvImage(a.y + 1, a.u + 1, a.v + 1)
        triple = mse_enc_dec(a, d)
        ok = mixed == 0.62 and zero == 0.0 and single == 4 / 64 and triple == 3.0
        report(
            "mixed BD-rate and enc/dec MSE arithmetic",
            ok,
            f"mixed(0.78,0.46)={mixed} (=0.62 exactly), mse cases: {zero}, {single}, {triple}",
        )


class TestRangeCoderAcceptance:
    def test_million_symbol_round_trip_within_entropy_bound(self):
        tables = build_entropy_tables()
        rng = np.random.default_rng(2024)
        bin_idx = 42
        freqs = tables.r_freqs[bin_idx]
        probs = freqs / freqs.sum()
        syms = rng.choice(NUM_SYMBOLS, size=1_000_000, p=probs).tolist()
        cdf = tables.cdf_list(bin_idx)
        payload = range_encode(syms, cdf)
        back = range_decode(payload, cdf, count=len(syms))
        ideal = estimate_rate_bits(freqs[syms])
        actual = len(payload) * 8
        ok = back == syms and actual <= ideal * 1.02
        report(
            "range coder (1e6-symbol round trip, size vs entropy)",
            ok,
            f"round trip exact={back == syms}, {actual} bits vs ideal {ideal:.0f} "
            f"({100 * (actual / ideal - 1):+.3f}% <= +2%)",
        )
