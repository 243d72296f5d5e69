"""Torch modules mirroring the codec topology.

All activations are LeakyReLU with slope 1/8 (a power of two), so the
trained float function family matches what the deployed decoder computes
with arithmetic shifts after quantization.
"""
from __future__ import annotations

import torch
from torch import nn

LRELU_SLOPE = 0.125
ACT_SHIFT = 3  # 2**-3 slope

# (in, c1, c2, latent, hyper, z) per branch
CHANNELS = {
    "y": (1, 12, 16, 24, 16, 12),
    "uv": (2, 10, 12, 16, 12, 8),
}

SIGMA_MIN = 0.05
SIGMA_MAX = 32.0
Z_SIGMA = 80.0


def _act():
    return nn.LeakyReLU(LRELU_SLOPE)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.c2 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.act = _act()

    def forward(self, x):
        return x + self.c2(self.act(self.c1(x)))


class Analysis(nn.Module):
    def __init__(self, in_ch, c1, c2, latent):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, c1, 4, 2, 1), _act(),
            nn.Conv2d(c1, c2, 4, 2, 1), _act(),
            nn.Conv2d(c2, latent, 4, 2, 1),
        )

    def forward(self, x):
        return self.net(x)


class Synthesis(nn.Module):
    def __init__(self, latent, c2, c1, out_ch):
        super().__init__()
        self.up0 = nn.ConvTranspose2d(latent, c2, 4, 2, 1)
        self.res0 = ResBlock(c2)
        self.up1 = nn.ConvTranspose2d(c2, c1, 4, 2, 1)
        self.res1 = ResBlock(c1)
        self.up2 = nn.ConvTranspose2d(c1, out_ch, 4, 2, 1)
        self.act = _act()

    def forward(self, x):
        x = self.res0(self.act(self.up0(x)))
        x = self.res1(self.act(self.up1(x)))
        return self.up2(x)


class HyperEncoder(nn.Module):
    def __init__(self, latent, hyper, z_ch):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(latent, hyper, 3, 1, 1), _act(),
            nn.Conv2d(hyper, z_ch, 4, 2, 1),
        )

    def forward(self, x):
        return self.net(x)


class HyperDecoder(nn.Module):
    def __init__(self, z_ch, hyper, latent):
        super().__init__()
        self.up = nn.ConvTranspose2d(z_ch, hyper, 4, 2, 1)
        self.out = nn.Conv2d(hyper, latent, 3, 1, 1)
        self.act = _act()

    def forward(self, x):
        return self.out(self.act(self.up(x)))


class BranchCodec(nn.Module):
    """One color branch with per-rate-point gain and inverse-gain vectors.

    The vectors factor into a fixed base ladder times trained per-channel
    profiles, so the rate points keep their ordering by construction while
    the per-channel shape is learned.
    """

    def __init__(self, name, num_rate_points, gain_bases):
        super().__init__()
        in_ch, c1, c2, latent, hyper, z_ch = CHANNELS[name]
        self.name = name
        self.latent_channels = latent
        self.g_a = Analysis(in_ch, c1, c2, latent)
        self.h_a = HyperEncoder(latent, hyper, z_ch)
        self.h_mu = HyperDecoder(z_ch, hyper, latent)
        self.h_sigma = HyperDecoder(z_ch, hyper, latent)
        self.g_s = Synthesis(latent, c2, c1, in_ch)
        self.register_buffer(
            "log_base", torch.log(torch.tensor(gain_bases, dtype=torch.float32))
        )
        self.gain_profile = nn.Parameter(torch.zeros(latent))
        self.inv_gain_profile = nn.Parameter(torch.zeros(latent))

    def log_gain(self, t):
        return self.log_base[t] + self.gain_profile

    def log_inv_gain(self, t):
        return -self.log_base[t] + self.inv_gain_profile

    def gain(self, t):
        return torch.exp(self.log_gain(t))[None, :, None, None]

    def inv_gain(self, t):
        return torch.exp(self.log_inv_gain(t))[None, :, None, None]


class ToyCodec(nn.Module):
    """Both branches trained jointly across the four rate points."""

    def __init__(self, num_rate_points=4, gain_bases=(0.7, 1.0, 1.45, 2.1)):
        super().__init__()
        self.gain_bases = tuple(gain_bases)
        self.y = BranchCodec("y", num_rate_points, gain_bases)
        self.uv = BranchCodec("uv", num_rate_points, gain_bases)
        self.num_rate_points = num_rate_points

    def branch(self, name):
        return self.y if name == "y" else self.uv


def discretized_gaussian_bits(residual, sigma):
    """-log2 of the probability mass of (r-0.5, r+0.5] under N(0, sigma)."""
    rt2 = 1.4142135623730951
    upper = torch.erf((residual + 0.5) / (sigma * rt2))
    lower = torch.erf((residual - 0.5) / (sigma * rt2))
    p = torch.clamp((upper - lower) * 0.5, min=2.0**-16)
    return -torch.log2(p)


def branch_rd(branch: BranchCodec, x, t, training=True, gain_override=None):
    """One branch's RD terms at rate point t: (bits, mse, aux dict).

    `gain_override` replaces the rate point's (gain, inverse gain) vectors,
    which is how derived rate points are probed."""
    if gain_override is not None:
        g = gain_override[0][None, :, None, None]
        ig = gain_override[1][None, :, None, None]
    else:
        g = branch.gain(t)
        ig = branch.inv_gain(t)
    y = branch.g_a(x)
    y_g = y * g
    z = branch.h_a(y_g)
    if training:
        z_tilde = z + torch.empty_like(z).uniform_(-0.5, 0.5)
    else:
        z_tilde = torch.round(z)
    mu = branch.h_mu(z_tilde)
    sigma = torch.clamp(branch.h_sigma(z_tilde), SIGMA_MIN, SIGMA_MAX)
    if training:
        y_tilde = y_g + torch.empty_like(y_g).uniform_(-0.5, 0.5)
    else:
        # Deployment reconstructs the latent from the transmitted residual.
        y_tilde = torch.round(y_g - mu) + mu
    bits_y = discretized_gaussian_bits(y_tilde - mu, sigma).sum()
    bits_z = discretized_gaussian_bits(z_tilde, torch.tensor(Z_SIGMA)).sum()
    x_hat = branch.g_s(y_tilde * ig)
    mse = torch.mean((x_hat - x) ** 2)
    return bits_y + bits_z, mse, {"y": y_g, "z": z, "x_hat": x_hat}
