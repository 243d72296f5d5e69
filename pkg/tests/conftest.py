"""Shared fixtures: seeded models, structured test images, and one small
quantization run reused across modules (it is deterministic and slow-ish)."""
import numpy as np
import pytest

from qcodec.fixture import make_fixture_model
from qcodec.imageio import YuvImage
from qcodec.pipeline import CalibrationSet, quantize_decoder_pipeline
from qcodec.quantize import QuantConfig
from qcodec.tensor import ActSpec

FIXTURE_SEED = 7


def blocky_image(seed: int, h: int, w: int) -> YuvImage:
    """Structured content at the codec's reconstruction scale: 8x8 blocks
    plus mild texture, in all three planes."""
    rng = np.random.default_rng(seed)

    def plane(hh, ww, lo, hi, noise):
        bh, bw = -(-hh // 8), -(-ww // 8)
        base = np.repeat(np.repeat(rng.integers(lo, hi, (bh, bw)), 8, 0), 8, 1)
        p = base[:hh, :ww] + rng.normal(0, noise, (hh, ww))
        return np.clip(p, 0, 255).astype(np.uint8)

    return YuvImage(
        plane(h, w, 40, 216, 5),
        plane(h // 2, w // 2, 56, 200, 3),
        plane(h // 2, w // 2, 56, 200, 3),
    )


SMALL_GRID = tuple(ActSpec(a, q) for a in (8, 10) for q in (32767, 8191))


@pytest.fixture(scope="session")
def fixture_model():
    return make_fixture_model(FIXTURE_SEED)


@pytest.fixture(scope="session")
def adv_model():
    return make_fixture_model(FIXTURE_SEED, adversarial=True)


@pytest.fixture(scope="session")
def image_factory():
    return blocky_image


@pytest.fixture(scope="session")
def calib_set(fixture_model):
    images = [blocky_image(s, 64, 64) for s in (0, 1)]
    return CalibrationSet.prepare(fixture_model, images)


@pytest.fixture(scope="session")
def quantized_run(fixture_model, calib_set):
    config = QuantConfig(
        weight_bits={"h_sigma": 8, "h_mu": 16, "g_s": 16}, grid=SMALL_GRID
    )
    return quantize_decoder_pipeline(fixture_model, calib_set, config)


@pytest.fixture(scope="session")
def quantized_model(quantized_run):
    return quantized_run[0]


@pytest.fixture(scope="session")
def quantize_rows(quantized_run):
    return quantized_run[1]
