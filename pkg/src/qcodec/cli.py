"""Command-line interface.

Subcommands: make-fixture, quantize, encode, decode, eval, verify, bdrate.
Every flag can also come from a JSON config file (--config); explicit
command-line values win.  The fully resolved configuration is echoed into a
.config.json sidecar next to every report.

Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 infeasible quantization.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .codec import BACKENDS, Bitstream, decode, encode
from .errors import (
    BitstreamError,
    ConfigError,
    InfeasibleChannelError,
    ModelFormatError,
    QCodecError,
)
from .fixture import make_fixture_model
from .harness import (
    EXIT_CONFIG,
    EXIT_INFEASIBLE,
    EXIT_OK,
    EXIT_VERIFY,
    bd_summary,
    eval_quality,
    list_images,
    run_verify,
    verify_report_rows,
    write_csv,
)
from .imageio import load_image, write_y4m
from .metrics import RDCurve, bd_rate
from .model import load_model, save_model
from .pipeline import BD_METRICS, CalibrationSet, quantize_decoder_pipeline
from .quantize import DEFAULT_CLIP_GRID, QuantConfig
from .tensor import ActSpec


def _parse_int_list(text: str) -> list:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part and not part.startswith("-"):
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _load_images(directory):
    paths = list_images(directory)
    return [load_image(p) for p in paths], [p.name for p in paths]


def _resolved(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys}


def _merge_config(args: argparse.Namespace, parser_defaults: dict):
    """Fill args from a JSON config file wherever the CLI kept a default."""
    if not getattr(args, "config", None):
        return
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {args.config}: {e}") from e
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigError(f"unknown config key {key!r}")
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, value)


def cmd_make_fixture(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = make_fixture_model(args.seed, adversarial=False)
    save_model(model, out / "fixture")
    adv = make_fixture_model(args.seed, adversarial=True)
    save_model(adv, out / "fixture_adv")
    print(f"wrote {out / 'fixture.json'} and {out / 'fixture_adv.json'}")
    return EXIT_OK


def _quant_config(args) -> QuantConfig:
    grid = tuple(
        ActSpec(a, q)
        for a in _parse_int_list(args.grid_a)
        for q in ((32767,) if args.fixed_clip else tuple(_parse_int_list(args.grid_q)))
    )
    steps = tuple(s.strip() for s in args.steps.split(","))
    return QuantConfig(
        weight_bits={"h_sigma": 8, "h_mu": args.h_mu_bits, "g_s": args.g_s_bits},
        grid=grid,
        fixed_clip_mode=args.fixed_clip,
        steps=steps,
    )


def cmd_quantize(args):
    model = load_model(args.model)
    images, names = _load_images(args.images)
    rate_points = _parse_int_list(args.rate_points)
    calib = CalibrationSet.prepare(model, images, names, rate_points)
    config = _quant_config(args)
    qmodel, rows = quantize_decoder_pipeline(model, calib, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(qmodel, out / "quantized")
    fields = ["step", "h_sigma", "h_mu", "g_s", *BD_METRICS, "mixed"]
    resolved = _resolved(
        args,
        ["model", "images", "out", "h_mu_bits", "g_s_bits", "fixed_clip", "steps", "grid_a", "grid_q", "rate_points"],
    )
    write_csv(out / "quantize_report.csv", fields, rows, config=resolved)
    print(f"wrote {out / 'quantized.json'} and {out / 'quantize_report.csv'}")
    return EXIT_OK


def cmd_encode(args):
    model = load_model(args.model)
    img = load_image(args.image)
    res = encode(img, model, args.rate_point, BACKENDS[args.backend])
    Path(args.out).write_bytes(res.bitstream.data)
    if args.enc_rec:
        write_y4m(args.enc_rec, res.enc_rec)
    bpp = res.rate_bits / (img.width * img.height)
    print(f"wrote {args.out}: {res.rate_bits} payload bits ({bpp:.4f} bpp)")
    return EXIT_OK


def cmd_decode(args):
    model = load_model(args.model)
    data = Path(args.bitstream).read_bytes()
    rec = decode(data, model, BACKENDS[args.backend])
    write_y4m(args.out, rec)
    print(f"wrote {args.out} ({rec.width}x{rec.height})")
    return EXIT_OK


def cmd_eval(args):
    anchor = load_model(args.anchor)
    model = load_model(args.model)
    images, names = _load_images(args.images)
    rate_points = _parse_int_list(args.rate_points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolved(args, ["anchor", "model", "images", "out", "rate_points", "backend"])
    reports = {}
    for tag, m in (("anchor", anchor), ("model", model)):
        reports[tag] = eval_quality(m, images, names, rate_points, backend=args.backend)
        rows = [
            {"rate_point": rp, **q.row()}
            for rp in rate_points
            for q in reports[tag][rp]
        ]
        fields = ["rate_point", "image", "rate_bpp", "ms_ssim", "y_psnr", "u_psnr", "v_psnr", "yuv_psnr"]
        write_csv(out / f"eval_{tag}.csv", fields, rows, config=resolved)
    bd = bd_summary(reports["anchor"], reports["model"], names)
    write_csv(out / "eval_bd.csv", [*BD_METRICS, "mixed"], [bd], config=resolved)
    print(f"wrote {out / 'eval_bd.csv'} (mixed BD-rate {bd['mixed']:.4f}%)")
    return EXIT_OK


def cmd_verify(args):
    models = [load_model(p) for p in args.models]
    labels = [Path(p).stem for p in args.models]
    images, names = _load_images(args.images)
    rate_points = _parse_int_list(args.rate_points)
    backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    if not backends or any(b not in BACKENDS for b in backends):
        raise ConfigError(
            f"backends must be a non-empty subset of {sorted(BACKENDS)}"
        )
    report = run_verify(models, labels, images, names, rate_points, backends)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolved(args, ["models", "images", "out", "rate_points", "backends"])
    fields, rows = verify_report_rows(report)
    write_csv(out / "verify_grid.csv", fields, rows, config=resolved)
    detail_fields = ["config", "image", "rate_point", "pair", "mse_enc_dec", "hash_equal", "note"]
    write_csv(out / "verify_detail.csv", detail_fields, report.detail, config=resolved)
    ok = report.all_quantized_pass()
    print(f"wrote {out / 'verify_grid.csv'}; fully-quantized rows {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_bdrate(args):
    def read_curve(path):
        pts = json.loads(Path(path).read_text())
        return RDCurve([(p[0], p[1]) for p in pts])

    value = bd_rate(read_curve(args.anchor), read_curve(args.test))
    print(f"{value:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcodec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="JSON file with defaults for any flag")

    sp = sub.add_parser("make-fixture", help="write seeded fixture model files")
    add_common(sp)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_make_fixture)

    sp = sub.add_parser("quantize", help="three-step decoder quantization")
    add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--images", required=True, help="calibration image dir")
    sp.add_argument("--out", required=True)
    sp.add_argument("--h-mu-bits", type=int, default=16, dest="h_mu_bits")
    sp.add_argument("--g-s-bits", type=int, default=16, dest="g_s_bits")
    sp.add_argument("--fixed-clip", action="store_true", dest="fixed_clip")
    sp.add_argument("--steps", default="h_sigma,h_mu,g_s")
    sp.add_argument("--grid-a", default="0-15", dest="grid_a")
    sp.add_argument("--grid-q", default=",".join(str(q) for q in DEFAULT_CLIP_GRID), dest="grid_q")
    sp.add_argument("--rate-points", default="0,1,2,3,4", dest="rate_points")
    sp.set_defaults(fn=cmd_quantize)

    sp = sub.add_parser("encode", help="encode one image to a bitstream")
    add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--rate-point", type=int, default=0, dest="rate_point")
    sp.add_argument("--backend", default="reference", choices=sorted(BACKENDS))
    sp.add_argument("--out", required=True)
    sp.add_argument("--enc-rec", dest="enc_rec", help="also write the encoder-side reconstruction (y4m)")
    sp.set_defaults(fn=cmd_encode)

    sp = sub.add_parser("decode", help="decode a bitstream to y4m")
    add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--bitstream", required=True)
    sp.add_argument("--backend", default="reference", choices=sorted(BACKENDS))
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_decode)

    sp = sub.add_parser("eval", help="RD evaluation and BD-rates vs an anchor")
    add_common(sp)
    sp.add_argument("--anchor", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rate-points", default="0,1,2,3,4", dest="rate_points")
    sp.add_argument("--backend", default="reference", choices=sorted(BACKENDS))
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("verify", help="cross-backend bit-exactness grid")
    add_common(sp)
    sp.add_argument("--models", required=True, nargs="+")
    sp.add_argument("--images", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rate-points", default="2", dest="rate_points")
    sp.add_argument("--backends", default="reference,tiled,permuted")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("bdrate", help="BD-rate between two curve JSON files")
    add_common(sp)
    sp.add_argument("--anchor", required=True, help="JSON [[rate,quality],...]")
    sp.add_argument("--test", required=True)
    sp.set_defaults(fn=cmd_bdrate)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {
        a.dest: a.default
        for sp_action in parser._subparsers._group_actions
        for sp in sp_action.choices.values()
        for a in sp._actions
    }
    try:
        _merge_config(args, defaults)
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleChannelError as e:
        print(f"infeasible quantization: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ModelFormatError, BitstreamError, QCodecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
