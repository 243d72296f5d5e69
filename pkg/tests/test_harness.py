"""Harness logic: verify grid semantics, report writing, thread invariance."""
import json
import math

import pytest

from qcodec.harness import (
    VerifyCell,
    VerifyReport,
    bd_summary,
    eval_quality,
    list_images,
    run_verify,
    verify_report_rows,
    write_csv,
)
from qcodec.errors import ConfigError
from qcodec.imageio import write_y4m

from conftest import blocky_image


class TestVerifyCell:
    def test_pass_requires_zero_mse_and_equal_hashes(self):
        ok = VerifyCell("a", "b", mse_sum=0.0, images=3)
        assert ok.passed
        assert not VerifyCell("a", "b", mse_sum=0.1, images=3).passed
        assert not VerifyCell("a", "b", mse_sum=0.0, images=3, hash_mismatches=1).passed
        bad = VerifyCell("a", "b", images=3, decode_errors=1)
        assert not bad.passed
        assert math.isinf(bad.mse_mean)

    def test_report_gate_only_counts_fully_quantized_rows(self):
        full = {"h_sigma": 8, "h_mu": 16, "g_s": 16}
        partial = {"h_sigma": 8, "h_mu": None, "g_s": None}
        bad_cell = VerifyCell("a", "b", mse_sum=1.0, images=1)
        good_cell = VerifyCell("a", "b", mse_sum=0.0, images=1)
        r = VerifyReport(rows=[("p", partial, {("a", "b"): bad_cell})])
        assert r.all_quantized_pass()
        r = VerifyReport(rows=[("f", full, {("a", "b"): bad_cell})])
        assert not r.all_quantized_pass()
        r = VerifyReport(rows=[("f", full, {("a", "b"): good_cell})])
        assert r.all_quantized_pass()


class TestRunVerify:
    def test_quantized_grid_all_zero(self, quantized_model, image_factory):
        imgs = [image_factory(70, 64, 64)]
        report = run_verify([quantized_model], ["q"], imgs, ["img"], [1])
        assert report.all_quantized_pass()
        fields, rows = verify_report_rows(report)
        assert rows[0]["h_sigma"] == "int8"
        pair_cols = [f for f in fields if "->" in f]
        assert len(pair_cols) == 9
        assert all(rows[0][c] == 0.0 for c in pair_cols)

    def test_detail_rows_cover_every_pair(self, quantized_model, image_factory):
        imgs = [image_factory(70, 64, 64)]
        report = run_verify([quantized_model], ["q"], imgs, ["img"], [1])
        assert len(report.detail) == 9
        assert all(d["hash_equal"] for d in report.detail)


class TestThreads:
    def test_results_identical_across_thread_counts(
        self, quantized_model, image_factory, monkeypatch
    ):
        imgs = [image_factory(s, 64, 64) for s in (71, 72, 73)]
        names = ["a", "b", "c"]
        rows = {}
        for threads in ("1", "3"):
            monkeypatch.setenv("QCODEC_THREADS", threads)
            reports = eval_quality(quantized_model, imgs, names, [0, 2])
            rows[threads] = [
                (q.name, q.rate_bpp, q.msssim, q.y_psnr) for rp in (0, 2) for q in reports[rp]
            ]
        assert rows["1"] == rows["3"]


class TestReports:
    def test_write_csv_is_deterministic_with_config_sidecar(self, tmp_path):
        rows = [{"a": 1, "b": 1.5}, {"a": 2, "b": math.inf}]
        p1 = write_csv(tmp_path / "r1.csv", ["a", "b"], rows, config={"x": 1})
        p2 = write_csv(tmp_path / "r2.csv", ["a", "b"], rows, config={"x": 1})
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.read_text().splitlines()[2] == "2,inf"
        side = json.loads((tmp_path / "r1.csv.config.json").read_text())
        assert side == {"x": 1}

    def test_list_images_requires_known_suffixes(self, tmp_path):
        with pytest.raises(ConfigError):
            list_images(tmp_path)
        write_y4m(tmp_path / "a.y4m", blocky_image(0, 32, 32))
        assert [p.name for p in list_images(tmp_path)] == ["a.y4m"]


class TestBdSummary:
    def test_anchor_vs_itself_is_zero(self, quantized_model, image_factory):
        imgs = [image_factory(2, 64, 64)]
        reports = eval_quality(quantized_model, imgs, ["img"], [0, 1, 2, 3, 4])
        bd = bd_summary(reports, reports, ["img"])
        assert abs(bd["mixed"]) < 1e-9
        assert abs(bd["yuv_psnr"]) < 1e-9
