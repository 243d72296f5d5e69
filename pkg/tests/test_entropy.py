"""Range coder round trips and frozen-table construction properties."""
import numpy as np
import pytest

from qcodec.entropy import (
    NUM_BINS,
    NUM_SYMBOLS,
    SYMBOL_BOUND,
    TOTAL,
    EntropyTables,
    RangeDecoder,
    RangeEncoder,
    build_entropy_tables,
    estimate_rate_bits,
    freqs_to_cdf,
    gaussian_freqs,
    range_decode,
    range_encode,
    sigma_bin_centers,
)
from qcodec.errors import BitstreamError


@pytest.fixture(scope="module")
def tables():
    return build_entropy_tables()


class TestTables:
    def test_valid_cdfs(self, tables):
        tables.validate()
        assert tables.r_cdfs.shape == (NUM_BINS, NUM_SYMBOLS + 1)

    def test_huge_sigma_is_nearly_uniform(self):
        f = gaussian_freqs(1e9)
        assert f.sum() == TOTAL
        assert int(f.max()) - int(f.min()) <= 1

    def test_tiny_sigma_is_deterministic_table(self):
        f = gaussian_freqs(1e-6)
        assert f[SYMBOL_BOUND] == TOTAL - (NUM_SYMBOLS - 1)
        assert (np.delete(f, SYMBOL_BOUND) == 1).all()
        # -log2((2^16-510)/2^16) ~ 0.0113 bits for the near-certain symbol
        bits = estimate_rate_bits(np.asarray([f[SYMBOL_BOUND]]))
        assert abs(bits - 0.011266) < 1e-4

    def test_symmetry_within_one_count(self, tables):
        freqs = tables.r_freqs
        flipped = freqs[:, ::-1]
        assert int(np.abs(freqs - flipped).max()) <= 1

    def test_mode_probability_matches_high_precision_oracle(self):
        mpmath = pytest.importorskip("mpmath")
        mpmath.mp.dps = 50
        sigma = 0.3
        f = gaussian_freqs(sigma)
        two = mpmath.mpf(2)
        p0 = mpmath.erf(mpmath.mpf("0.5") / (sigma * mpmath.sqrt(two)))
        budget = TOTAL - NUM_SYMBOLS
        # Construction gives 1 + floor/ceil of p0 * budget.
        expected = float(p0 * budget) + 1
        assert abs(int(f[SYMBOL_BOUND]) - expected) <= 1.0

    def test_round_trip_bytes(self, tables):
        payload = tables.to_bytes()
        again = EntropyTables.from_bytes(payload, tables.sigmas, tables.edges)
        assert np.array_equal(again.r_cdfs, tables.r_cdfs)
        assert np.array_equal(again.z_cdf, tables.z_cdf)
        assert again.digest() == tables.digest()

    def test_integer_bin_lookup(self, tables):
        scale = 8
        edges_i = tables.edges_int(scale)
        assert (np.diff(edges_i) >= 0).all()
        sig = np.asarray([-5, 0, edges_i[0], edges_i[0] + 1, edges_i[-1] + 100])
        bins = tables.bins_for_sigma_int(sig, scale)
        assert bins[0] == 0 and bins[1] == 0
        assert bins[2] == 1  # side="right": a value on the edge goes up
        assert bins[-1] == NUM_BINS - 1

    def test_degenerate_sigma_rejected(self):
        with pytest.raises(ValueError):
            gaussian_freqs(0.0)


class TestRangeCoder:
    def test_empty_stream_is_flush_only(self):
        data = range_encode([], [0, TOTAL])
        assert data == b"\x00\x00\x00\x00"
        assert range_decode(data, [0, TOTAL], count=0) == []

    def test_round_trip_random_symbols(self, tables):
        rng = np.random.default_rng(17)
        cdf = tables.cdf_list(40)
        syms = rng.integers(0, NUM_SYMBOLS, size=10_000).tolist()
        data = range_encode(syms, cdf)
        assert range_decode(data, cdf, count=len(syms)) == syms

    def test_round_trip_mixed_tables(self, tables):
        rng = np.random.default_rng(3)
        bins = rng.integers(0, NUM_BINS, size=2_000)
        syms = []
        cdfs = []
        for b in bins:
            cdf = tables.cdf_list(int(b))
            cdfs.append(cdf)
            syms.append(int(rng.integers(0, NUM_SYMBOLS)))
        data = range_encode(syms, cdfs)
        assert range_decode(data, cdfs) == syms

    def test_round_trip_skewed_table(self):
        f = gaussian_freqs(0.08)
        cdf = freqs_to_cdf(f).tolist()
        syms = [SYMBOL_BOUND] * 5_000 + [SYMBOL_BOUND + 1, SYMBOL_BOUND - 1] * 10
        data = range_encode(syms, cdf)
        assert range_decode(data, cdf, count=len(syms)) == syms
        assert len(data) < 200  # ~0.011 bits/symbol plus flush

    def test_size_tracks_entropy_sum(self, tables):
        rng = np.random.default_rng(23)
        b = 45
        freqs = tables.r_freqs[b]
        probs = freqs / freqs.sum()
        syms = rng.choice(NUM_SYMBOLS, size=100_000, p=probs).tolist()
        data = range_encode(syms, tables.cdf_list(b))
        ideal = estimate_rate_bits(freqs[syms])
        assert len(data) * 8 <= ideal * 1.02 + 64
        assert len(data) * 8 >= ideal * 0.98

    def test_truncated_payload_raises(self, tables):
        cdf = tables.cdf_list(10)
        syms = [5, 300, 200, 17] * 50
        data = range_encode(syms, cdf)
        with pytest.raises(BitstreamError):
            range_decode(data[: len(data) // 4], cdf, count=len(syms))

    def test_desync_detected_on_garbage(self, tables):
        # All-0xFF payloads push the decoded value outside every table.
        cdf = freqs_to_cdf(gaussian_freqs(1e-6)).tolist()
        dec = RangeDecoder(b"\xff" * 64)
        with pytest.raises(BitstreamError):
            for _ in range(64):
                dec.decode(cdf)

    def test_encoder_bytes_are_pure_function_of_inputs(self, tables):
        syms = [1, 2, 3, 400, 200] * 100
        cdf = tables.cdf_list(5)
        assert range_encode(syms, cdf) == range_encode(syms, cdf)
