"""Session fixtures: one trained toy codec, its export, and a CLI runner
for the deployed codec (files and subprocesses are the only interface)."""
import subprocess
import sys

import pytest

from codectrainer.data import write_image_set
from codectrainer.export import export
from codectrainer.train import TrainSpec, fit_gain_vectors, train_models

TRAIN_SPEC = TrainSpec(steps=600, seed=1, lr=2e-3, lambdas=(6.0, 20.0, 80.0, 320.0))


@pytest.fixture(scope="session")
def trained():
    result = train_models(TRAIN_SPEC)
    return result


@pytest.fixture(scope="session")
def gain5(trained):
    return fit_gain_vectors(trained.rate_points[-1])


@pytest.fixture(scope="session")
def exported(tmp_path_factory, trained, gain5):
    d = tmp_path_factory.mktemp("export")
    manifest, blob = export(trained.codec, d / "trained", gain5, spec=TRAIN_SPEC)
    return {"dir": d, "manifest": manifest, "blob": blob}


@pytest.fixture(scope="session")
def calib_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("calib")
    write_image_set(d, seed=1001, count=16, size=64)
    return d


@pytest.fixture(scope="session")
def probe_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("probe")
    write_image_set(d, seed=777, count=2, size=64)
    return d


def run_codec_cli(*args):
    """Drive the deployed codec through its command-line interface."""
    return subprocess.run(
        [sys.executable, "-m", "qcodec.cli", *[str(a) for a in args]],
        capture_output=True,
        text=True,
    )


@pytest.fixture(scope="session")
def codec_cli():
    return run_codec_cli
