"""Orchestration: cross-backend verification, model evaluation, and
deterministic CSV/JSON report generation."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .codec import BACKENDS, decode, encode
from .errors import BitstreamError, ConfigError
from .metrics import (
    QualityReport,
    RDCurve,
    bd_rate,
    mixed_bd_rate,
    ms_ssim,
    mse_enc_dec,
    psnr,
    yuv_psnr,
)
from .model import ModelGraph

THREADS_ENV = "QCODEC_THREADS"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_INFEASIBLE = 4


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map_jobs(fn, jobs):
    """Run per-image jobs, possibly in parallel; results keep job order."""
    workers = thread_count()
    if workers == 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def list_images(directory) -> list:
    paths = sorted(
        p for p in Path(directory).iterdir() if p.suffix in (".y4m", ".ppm")
    )
    if not paths:
        raise ConfigError(f"no .y4m/.ppm images under {directory}")
    return paths


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:.6f}"
    return str(v)


def write_csv(path, fieldnames, rows, config: dict | None = None):
    """Deterministic CSV writer; the resolved run config is echoed into a
    sibling .config.json for provenance."""
    path = Path(path)
    lines = [",".join(fieldnames)]
    for row in rows:
        lines.append(",".join(_fmt(row[k]) for k in fieldnames))
    path.write_text("\n".join(lines) + "\n")
    if config is not None:
        side = path.with_suffix(path.suffix + ".config.json")
        side.write_text(json.dumps(config, sort_keys=True, indent=1) + "\n")
    return path


@dataclass
class VerifyCell:
    """One (model-config, backend pair) aggregate of enc/dec deviations."""

    enc_backend: str
    dec_backend: str
    mse_sum: float = 0.0
    images: int = 0
    hash_mismatches: int = 0
    decode_errors: int = 0

    @property
    def mse_mean(self) -> float:
        if self.decode_errors:
            return math.inf
        return self.mse_sum / max(self.images, 1)

    @property
    def passed(self) -> bool:
        return (
            self.mse_sum == 0.0
            and self.hash_mismatches == 0
            and self.decode_errors == 0
        )


@dataclass
class VerifyReport:
    """Cross-platform test grid: rows are quantization configurations, columns
    are ordered backend pairs; pass means zero MSE and equal hashes."""

    rows: list = field(default_factory=list)  # (label, quant_state, {pair: cell})
    detail: list = field(default_factory=list)

    def all_quantized_pass(self) -> bool:
        ok = True
        for label, state, cells in self.rows:
            fully = all(v is not None for v in state.values())
            if fully:
                ok &= all(c.passed for c in cells.values())
        return ok


def run_verify(
    models: list,
    labels: list,
    images: list,
    image_names: list,
    rate_points,
    backends=None,
) -> VerifyReport:
    """Encode with backend A, decode with backend B, for every ordered pair
    and every model configuration; the summed per-plane MSE plus output hashes
    decide a pass."""
    backends = [BACKENDS[b] for b in (backends or BACKENDS)]
    report = VerifyReport()
    for label, model in zip(labels, models):
        cells = {
            (a.name, b.name): VerifyCell(a.name, b.name)
            for a in backends
            for b in backends
        }
        for rp in rate_points:

            def encode_job(args):
                name, img = args
                return {a.name: encode(img, model, rp, a) for a in backends}

            enc_results = _map_jobs(encode_job, list(zip(image_names, images)))
            for (name, img), encs in zip(zip(image_names, images), enc_results):
                for a in backends:
                    for b in backends:
                        cell = cells[(a.name, b.name)]
                        cell.images += 1
                        try:
                            rec = decode(encs[a.name].bitstream.data, model, b)
                        except BitstreamError as e:
                            cell.decode_errors += 1
                            report.detail.append(
                                {
                                    "config": label,
                                    "image": name,
                                    "rate_point": rp,
                                    "pair": f"{a.name}->{b.name}",
                                    "mse_enc_dec": math.inf,
                                    "hash_equal": False,
                                    "note": f"decode error: {e}",
                                }
                            )
                            continue
                        m = mse_enc_dec(encs[a.name].enc_rec, rec)
                        same = rec.digest() == encs[a.name].enc_rec.digest()
                        cell.mse_sum += m
                        cell.hash_mismatches += 0 if same else 1
                        report.detail.append(
                            {
                                "config": label,
                                "image": name,
                                "rate_point": rp,
                                "pair": f"{a.name}->{b.name}",
                                "mse_enc_dec": m,
                                "hash_equal": same,
                                "note": "",
                            }
                        )
        report.rows.append((label, model.quant_state(), cells))
    return report


def verify_report_rows(report: VerifyReport) -> tuple[list, list]:
    pairs = sorted({p for _, _, cells in report.rows for p in cells})
    fields = ["config", "h_sigma", "h_mu", "g_s"] + [f"{a}->{b}" for a, b in pairs]
    rows = []
    for label, state, cells in report.rows:
        row = {
            "config": label,
            "h_sigma": f"int{state['h_sigma']}" if state["h_sigma"] else "-",
            "h_mu": f"int{state['h_mu']}" if state["h_mu"] else "-",
            "g_s": f"int{state['g_s']}" if state["g_s"] else "-",
        }
        for a, b in pairs:
            row[f"{a}->{b}"] = cells[(a, b)].mse_mean
        rows.append(row)
    return fields, rows


def eval_quality(model: ModelGraph, images, names, rate_points, backend="reference"):
    """Encode/decode every image at every rate point; per-image
    QualityReports keyed by rate point, using true payload rates."""
    be = BACKENDS[backend]
    out = {rp: [] for rp in rate_points}
    for rp in rate_points:

        def job(args):
            name, img = args
            res = encode(img, model, rp, be)
            rec = decode(res.bitstream.data, model, be)
            return QualityReport(
                name=name,
                rate_bpp=res.rate_bits / (img.width * img.height),
                msssim=ms_ssim(img.y, rec.y),
                y_psnr=psnr(img.y, rec.y),
                u_psnr=psnr(img.u, rec.u),
                v_psnr=psnr(img.v, rec.v),
            )

        out[rp] = _map_jobs(job, list(zip(names, images)))
    return out


def bd_summary(anchor_reports: dict, test_reports: dict, names: list) -> dict:
    """Mean per-image BD-rates (per metric and mixed) between two models'
    quality maps from eval_quality."""
    rate_points = sorted(anchor_reports)
    metrics = {
        "ms_ssim": lambda q: q.msssim,
        "y_psnr": lambda q: q.y_psnr,
        "u_psnr": lambda q: q.u_psnr,
        "v_psnr": lambda q: q.v_psnr,
        "yuv_psnr": lambda q: q.yuv_psnr,
    }
    sums = {m: 0.0 for m in metrics}
    for idx in range(len(names)):
        for m, get in metrics.items():
            a = RDCurve(
                [(anchor_reports[rp][idx].rate_bpp, get(anchor_reports[rp][idx])) for rp in rate_points]
            )
            t = RDCurve(
                [(test_reports[rp][idx].rate_bpp, get(test_reports[rp][idx])) for rp in rate_points]
            )
            sums[m] += bd_rate(a, t)
    out = {m: s / len(names) for m, s in sums.items()}
    out["mixed"] = mixed_bd_rate(out["yuv_psnr"], out["ms_ssim"])
    return out
