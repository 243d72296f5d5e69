"""Training loop: four rate-distortion trade-offs trained jointly, one
shared network with per-rate-point gain vectors."""
from __future__ import annotations

import argparse
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import normalized_batch, write_image_set
from .net import ToyCodec, branch_rd


class TrainingDiverged(RuntimeError):
    """NaN/inf loss; carries a short report of where it happened."""


@dataclass
class TrainSpec:
    """Training configuration; lambdas must be strictly increasing, four
    values (one per trained rate point)."""

    lambdas: tuple = (8.0, 24.0, 90.0, 300.0)
    steps: int = 400
    batch: int = 8
    crop: int = 64
    lr: float = 1e-3
    seed: int = 1
    dataset_dir: str | None = None  # None -> procedural textures
    export_dir: str | None = None

    def __post_init__(self):
        if len(self.lambdas) != 4:
            raise ValueError("exactly four lambda values are required")
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ValueError("lambdas must be strictly increasing")


@dataclass
class RatePoint:
    """A trained rate point: the shared network plus its index/lambda."""

    codec: ToyCodec
    index: int
    lam: float


@dataclass
class TrainResult:
    codec: ToyCodec
    rate_points: list
    history: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]


def _load_dataset_batches(spec: TrainSpec):
    """Either an on-the-fly procedural generator or crops from a dir of
    .npy planes (kept simple; procedural is the default)."""
    rng = np.random.default_rng(spec.seed)

    def batch():
        return normalized_batch(rng, spec.batch, spec.crop)

    return batch


def train_models(spec: TrainSpec) -> TrainResult:
    """Train the shared codec over the four lambdas (round-robin per step).

    Returns the four rate points; raises TrainingDiverged on NaN loss.
    """
    torch.manual_seed(spec.seed)
    torch.set_num_threads(1)
    codec = ToyCodec()
    opt = torch.optim.Adam(codec.parameters(), lr=spec.lr)
    next_batch = _load_dataset_batches(spec)
    history = []
    for step in range(spec.steps):
        t = step % len(spec.lambdas)
        lam = spec.lambdas[t]
        luma, chroma = next_batch()
        xl = torch.from_numpy(luma)
        xc = torch.from_numpy(chroma)
        bits_y, mse_y, _ = branch_rd(codec.y, xl, t)
        bits_uv, mse_uv, _ = branch_rd(codec.uv, xc, t)
        pixels = xl.numel() + 0.5 * xc.numel()
        bpp = (bits_y + bits_uv) / pixels
        loss = bpp + lam * (mse_y + 0.5 * mse_uv)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"loss became non-finite at step {step} (rate point {t}, "
                f"lambda {lam}); last finite losses: {history[-4:]}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    codec.eval()
    points = [RatePoint(codec, t, lam) for t, lam in enumerate(spec.lambdas)]
    return TrainResult(codec=codec, rate_points=points, history=history)


@torch.no_grad()
def probe_rd(codec: ToyCodec, t: int, seed: int = 500, gain_override=None):
    """Deterministic probe: (bits-per-pixel estimate, mse) at rate point t
    on a fixed procedural image; used for ordering checks."""
    rng = np.random.default_rng(seed)
    luma, chroma = normalized_batch(rng, 1, 64)
    xl = torch.from_numpy(luma)
    xc = torch.from_numpy(chroma)
    ov = gain_override or {}
    bits_y, mse_y, _ = branch_rd(codec.y, xl, t, training=False, gain_override=ov.get("y"))
    bits_uv, mse_uv, _ = branch_rd(codec.uv, xc, t, training=False, gain_override=ov.get("uv"))
    pixels = xl.numel() + 0.5 * xc.numel()
    return float((bits_y + bits_uv) / pixels), float(mse_y + 0.5 * mse_uv)


def fit_gain_vectors(point4: RatePoint, extrapolate: float = 1.0) -> dict:
    """Derive the fifth (highest) rate point's gain/inverse-gain vectors
    from the fourth by extending the trained ladder's last step.

    Returns {"y": (gain, inv_gain), "uv": ...} positive float tensors.
    """
    codec = point4.codec
    out = {}
    with torch.no_grad():
        for name in ("y", "uv"):
            br = codec.branch(name)
            g3 = torch.exp(br.log_gain(point4.index - 1))
            g4 = torch.exp(br.log_gain(point4.index))
            ratio = torch.clamp((g4 / g3) ** extrapolate, min=1.05)
            gain5 = g4 * ratio
            ig3 = torch.exp(br.log_inv_gain(point4.index - 1))
            ig4 = torch.exp(br.log_inv_gain(point4.index))
            ig_ratio = torch.clamp((ig4 / ig3) ** extrapolate, max=1 / 1.05)
            ig5 = ig4 * ig_ratio
            if (gain5 <= 0).any() or (ig5 <= 0).any():
                raise ValueError("derived gain vectors must stay positive")
            out[name] = (gain5, ig5)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description="train the toy codec and export it")
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--lambdas", default="8,24,90,300")
    ap.add_argument("--calib-images", type=int, default=16, dest="calib_images")
    args = ap.parse_args(argv)

    from .export import export

    spec = TrainSpec(
        lambdas=tuple(float(x) for x in args.lambdas.split(",")),
        steps=args.steps,
        seed=args.seed,
        export_dir=args.out,
    )
    result = train_models(spec)
    gain5 = fit_gain_vectors(result.rate_points[-1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = export(result.codec, out / "trained", gain5, spec=spec)
    calib_dir = out / "calib"
    calib_dir.mkdir(exist_ok=True)
    write_image_set(calib_dir, seed=spec.seed + 1000, count=args.calib_images)
    print(json.dumps({"manifest": str(paths[0]), "final_loss": result.final_loss}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
