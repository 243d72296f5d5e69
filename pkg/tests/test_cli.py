"""CLI behavior: subcommands, config merging, determinism, exit codes."""
import json

import pytest

from qcodec.cli import main
from qcodec.harness import EXIT_CONFIG, EXIT_OK
from qcodec.imageio import read_y4m, write_y4m
from qcodec.model import load_model, save_model

from conftest import blocky_image


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("imgs")
    for seed in (0, 1):
        write_y4m(d / f"img{seed}.y4m", blocky_image(seed, 64, 64))
    return d


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("fixture")
    assert main(["make-fixture", "--seed", "7", "--out", str(d)]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def qmodel_dir(tmp_path_factory, fixture_dir, image_dir, quantized_model):
    d = tmp_path_factory.mktemp("qmodel")
    save_model(quantized_model, d / "quantized")
    return d


class TestMakeFixture:
    def test_same_seed_is_byte_identical(self, tmp_path, fixture_dir):
        again = tmp_path / "again"
        assert main(["make-fixture", "--seed", "7", "--out", str(again)]) == EXIT_OK
        for name in ("fixture.json", "fixture.bin", "fixture_adv.json", "fixture_adv.bin"):
            assert (again / name).read_bytes() == (fixture_dir / name).read_bytes()

    def test_different_seed_differs(self, tmp_path, fixture_dir):
        other = tmp_path / "other"
        assert main(["make-fixture", "--seed", "8", "--out", str(other)]) == EXIT_OK
        assert (other / "fixture.bin").read_bytes() != (fixture_dir / "fixture.bin").read_bytes()

    def test_seed_recorded_in_manifest(self, fixture_dir):
        meta = json.loads((fixture_dir / "fixture.json").read_text())["meta"]
        assert meta["seed"] == 7
        assert meta["prng"] == "numpy-pcg64"


class TestQuantizeCommand:
    def run(self, out, fixture_dir, image_dir):
        return main([
            "quantize",
            "--model", str(fixture_dir / "fixture.json"),
            "--images", str(image_dir),
            "--out", str(out),
            "--steps", "h_sigma",
            "--grid-a", "8,10",
            "--grid-q", "32767",
            "--rate-points", "0,1,2,3,4",
        ])

    def test_writes_model_and_report(self, tmp_path, fixture_dir, image_dir):
        out = tmp_path / "q"
        assert self.run(out, fixture_dir, image_dir) == EXIT_OK
        model = load_model(out / "quantized.json")
        assert model.quant_state()["h_sigma"] == 8
        report = (out / "quantize_report.csv").read_text()
        header, row = report.splitlines()[:2]
        assert header.startswith("step,h_sigma,h_mu,g_s,ms_ssim")
        assert row.startswith("h_sigma,int8,-,-")
        assert (out / "quantize_report.csv.config.json").exists()

    def test_rerun_is_byte_identical(self, tmp_path, fixture_dir, image_dir):
        out1 = tmp_path / "r1"
        out2 = tmp_path / "r2"
        assert self.run(out1, fixture_dir, image_dir) == EXIT_OK
        assert self.run(out2, fixture_dir, image_dir) == EXIT_OK
        assert (out1 / "quantize_report.csv").read_bytes() == (out2 / "quantize_report.csv").read_bytes()
        assert (out1 / "quantized.bin").read_bytes() == (out2 / "quantized.bin").read_bytes()


class TestCodecCommands:
    def test_encode_decode_round_trip(self, tmp_path, qmodel_dir, image_dir):
        bits = tmp_path / "img.qhb"
        rc = main([
            "encode",
            "--model", str(qmodel_dir / "quantized.json"),
            "--image", str(image_dir / "img0.y4m"),
            "--rate-point", "2",
            "--out", str(bits),
            "--enc-rec", str(tmp_path / "enc.y4m"),
        ])
        assert rc == EXIT_OK
        rec = tmp_path / "rec.y4m"
        rc = main([
            "decode",
            "--model", str(qmodel_dir / "quantized.json"),
            "--bitstream", str(bits),
            "--out", str(rec),
        ])
        assert rc == EXIT_OK
        assert read_y4m(rec).digest() == read_y4m(tmp_path / "enc.y4m").digest()

    def test_decode_bad_stream_fails_cleanly(self, tmp_path, qmodel_dir):
        bad = tmp_path / "bad.qhb"
        bad.write_bytes(b"not a bitstream")
        rc = main([
            "decode",
            "--model", str(qmodel_dir / "quantized.json"),
            "--bitstream", str(bad),
            "--out", str(tmp_path / "rec.y4m"),
        ])
        assert rc == 1


class TestVerifyCommand:
    def test_quantized_model_passes(self, tmp_path, qmodel_dir, image_dir):
        out = tmp_path / "verify"
        rc = main([
            "verify",
            "--models", str(qmodel_dir / "quantized.json"),
            "--images", str(image_dir),
            "--out", str(out),
            "--rate-points", "2",
        ])
        assert rc == EXIT_OK
        grid = (out / "verify_grid.csv").read_text().splitlines()
        assert grid[0].startswith("config,h_sigma,h_mu,g_s")
        values = grid[1].split(",")[4:]
        assert all(v == "0.000000" for v in values)

    def test_adversarial_float_model_reports_deviation(self, tmp_path, fixture_dir, image_dir):
        out = tmp_path / "verify_adv"
        rc = main([
            "verify",
            "--models", str(fixture_dir / "fixture_adv.json"),
            "--images", str(image_dir),
            "--out", str(out),
            "--rate-points", "2",
        ])
        # Not fully quantized, so deviations are reported but do not fail.
        assert rc == EXIT_OK
        rows = (out / "verify_grid.csv").read_text().splitlines()
        values = [float(v) for v in rows[1].split(",")[4:]]
        assert any(v > 0 for v in values)


class TestEvalCommand:
    def test_model_vs_itself_reports_zero_bd(self, tmp_path, qmodel_dir, image_dir):
        out = tmp_path / "eval"
        rc = main([
            "eval",
            "--anchor", str(qmodel_dir / "quantized.json"),
            "--model", str(qmodel_dir / "quantized.json"),
            "--images", str(image_dir),
            "--out", str(out),
        ])
        assert rc == EXIT_OK
        bd_line = (out / "eval_bd.csv").read_text().splitlines()[1]
        assert all(abs(float(v)) < 1e-9 for v in bd_line.split(","))
        anchor_rows = (out / "eval_anchor.csv").read_text()
        assert anchor_rows == (out / "eval_model.csv").read_text()
        header = anchor_rows.splitlines()[0]
        assert header == "rate_point,image,rate_bpp,ms_ssim,y_psnr,u_psnr,v_psnr,yuv_psnr"


class TestBdrateCommand:
    def test_identity_curves(self, tmp_path, capsys):
        pts = [[0.25, 30.0], [0.5, 34.0], [1.0, 38.5], [2.0, 44.0]]
        a = tmp_path / "a.json"
        a.write_text(json.dumps(pts))
        assert main(["bdrate", "--anchor", str(a), "--test", str(a)]) == EXIT_OK
        assert abs(float(capsys.readouterr().out.strip())) < 1e-9


class TestConfigFile:
    def test_config_file_supplies_defaults(self, tmp_path, qmodel_dir, image_dir):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"rate-point": 1}))
        bits = tmp_path / "o.qhb"
        rc = main([
            "encode",
            "--config", str(cfg),
            "--model", str(qmodel_dir / "quantized.json"),
            "--image", str(image_dir / "img0.y4m"),
            "--out", str(bits),
        ])
        assert rc == EXIT_OK
        from qcodec.codec import parse_header

        assert parse_header(bits.read_bytes())["rate_point"] == 1

    def test_cli_overrides_config_file(self, tmp_path, qmodel_dir, image_dir):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"rate-point": 1}))
        bits = tmp_path / "o.qhb"
        rc = main([
            "encode",
            "--config", str(cfg),
            "--model", str(qmodel_dir / "quantized.json"),
            "--image", str(image_dir / "img0.y4m"),
            "--rate-point", "3",
            "--out", str(bits),
        ])
        assert rc == EXIT_OK
        from qcodec.codec import parse_header

        assert parse_header(bits.read_bytes())["rate_point"] == 3

    def test_unknown_config_key_is_config_error(self, tmp_path, qmodel_dir, image_dir):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"not-a-flag": 1}))
        rc = main([
            "encode",
            "--config", str(cfg),
            "--model", str(qmodel_dir / "quantized.json"),
            "--image", str(image_dir / "img0.y4m"),
            "--out", str(tmp_path / "o.qhb"),
        ])
        assert rc == EXIT_CONFIG

    def test_missing_model_path_is_config_error(self, tmp_path, image_dir):
        rc = main([
            "encode",
            "--model", str(tmp_path / "nope.json"),
            "--image", str(image_dir / "img0.y4m"),
            "--out", str(tmp_path / "o.qhb"),
        ])
        assert rc == EXIT_CONFIG

    def test_unknown_backend_is_config_error(self, tmp_path, qmodel_dir, image_dir):
        rc = main([
            "verify",
            "--models", str(qmodel_dir / "quantized.json"),
            "--images", str(image_dir),
            "--out", str(tmp_path),
            "--backends", "gpu",
        ])
        assert rc == EXIT_CONFIG
