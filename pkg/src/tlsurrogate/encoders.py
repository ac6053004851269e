"""Bathymetry and geometry encoders and the fusion block feeding the GP head."""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ShapeMismatch

DTYPE = torch.float64


def silu(x):
    x = torch.as_tensor(x, dtype=DTYPE)
    return x * torch.sigmoid(x)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = torch.as_tensor(x, dtype=DTYPE)
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def adaptive_avg_pool(seq, out_len: int = 16, in_len: int = 128):
    """Average consecutive, equal-width bins along the last axis."""
    seq = torch.as_tensor(seq)
    if seq.shape[-1] != in_len or in_len % out_len:
        raise ShapeMismatch(f"expected trailing length {in_len}, got {tuple(seq.shape)}")
    return seq.reshape(*seq.shape[:-1], out_len, in_len // out_len).mean(-1)


def init_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """Uniform(+-sqrt(1/fan_in)) init for every affine/conv layer, in registration order."""
    for layer in module.modules():
        if isinstance(layer, (nn.Linear, nn.Conv1d)):
            fan_in = layer.weight[0].numel()
            bound = math.sqrt(1.0 / fan_in)
            with torch.no_grad():
                layer.weight.copy_(torch.empty_like(layer.weight).uniform_(-bound, bound, generator=generator))
                layer.bias.copy_(torch.empty_like(layer.bias).uniform_(-bound, bound, generator=generator))


class BathyEncoder(nn.Module):
    """Conv1D(+SiLU+BN) stack, pooling to 16 bins, then an MLP head."""

    def __init__(self, d_out=16, channels=(8, 16, 32), head=(256, 128, 64), profile_len=128,
                 pooled_len=16, kernel_size=5):
        super().__init__()
        self.profile_len = profile_len
        self.pooled_len = pooled_len
        chans = (1,) + tuple(channels)
        self.convs = nn.ModuleList(
            nn.Conv1d(cin, cout, kernel_size, padding=kernel_size // 2, dtype=DTYPE)
            for cin, cout in zip(chans[:-1], chans[1:])
        )
        self.conv_norms = nn.ModuleList(nn.BatchNorm1d(c, dtype=DTYPE) for c in channels)
        widths = (chans[-1] * pooled_len,) + tuple(head)
        self.head = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:]))
        self.head_norms = nn.ModuleList(nn.BatchNorm1d(w, dtype=DTYPE) for w in head)
        self.out = nn.Linear(widths[-1], d_out, dtype=DTYPE)

    def features(self, omega):
        """Convolution stack and pooling, flattened to (B, channels * pooled_len)."""
        if omega.ndim != 2 or omega.shape[1] != self.profile_len:
            raise ShapeMismatch(f"bathymetry batch must be (B, {self.profile_len}), got {tuple(omega.shape)}")
        x = omega.unsqueeze(1)
        for conv, norm in zip(self.convs, self.conv_norms):
            x = norm(silu(conv(x)))
        x = adaptive_avg_pool(x, self.pooled_len, self.profile_len)
        return x.flatten(1)

    def forward(self, omega):
        x = self.features(omega)
        for lin, norm in zip(self.head, self.head_norms):
            x = norm(silu(lin(x)))
        return self.out(x)


class FeatureEncoder(nn.Module):
    """Linear -> BN -> GELU blocks with a final plain linear layer."""

    def __init__(self, d_in=7, widths=(32, 64, 128, 256, 128, 64), d_out=16):
        super().__init__()
        self.d_in = d_in
        dims = (d_in,) + tuple(widths)
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:]))
        self.norms = nn.ModuleList(nn.BatchNorm1d(w, dtype=DTYPE) for w in widths)
        self.out = nn.Linear(dims[-1], d_out, dtype=DTYPE)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeMismatch(f"feature batch must be (B, {self.d_in}), got {tuple(x.shape)}")
        for lin, norm in zip(self.layers, self.norms):
            x = gelu(norm(lin(x)))
        return self.out(x)


class Fusion(nn.Module):
    def __init__(self, d_in, d_out):
        super().__init__()
        self.d_in = d_in
        self.linear = nn.Linear(d_in, d_out, dtype=DTYPE)

    def forward(self, z_geo, z_bathy):
        z = torch.cat([z_geo, z_bathy], dim=-1)
        if z.shape[-1] != self.d_in:
            raise ShapeMismatch(f"fusion expects {self.d_in} inputs, got {z.shape[-1]}")
        return gelu(self.linear(z))


class Encoder(nn.Module):
    """Maps normalized geometry (B, 7) and bathymetry (B, 128) to the GP latent space."""

    def __init__(self, d_geo=16, d_bathy=16, d_lat=16, geo_widths=(32, 64, 128, 256, 128, 64),
                 bathy_channels=(8, 16, 32), bathy_head=(256, 128, 64), profile_len=128,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.bathy = BathyEncoder(d_bathy, bathy_channels, bathy_head, profile_len)
        self.geo = FeatureEncoder(7, geo_widths, d_geo)
        self.fusion = Fusion(d_geo + d_bathy, d_lat)
        self.latent_dim = d_lat
        init_uniform_(self, generator if generator is not None else torch.Generator().manual_seed(0))

    def bathy_encode(self, omega):
        return self.bathy(omega)

    def feature_encode(self, x):
        return self.geo(x)

    def fuse(self, z_geo, z_bathy):
        return self.fusion(z_geo, z_bathy)

    def forward(self, x_geo, omega, omega_index=None):
        """``omega_index`` maps rows of ``x_geo`` onto rows of a deduplicated ``omega``.

        Only valid in eval mode, where normalization does not couple samples.
        """
        z_bathy = self.bathy(omega)
        if omega_index is not None:
            if self.training:
                raise RuntimeError("deduplicated bathymetry requires eval mode")
            z_bathy = z_bathy[omega_index]
        return self.fuse(self.geo(x_geo), z_bathy)


class RawInput(nn.Module):
    """Encoder stand-in for the no-encoder ablations: the GP sees the 7 normalized features."""

    latent_dim = 7

    def forward(self, x_geo, omega=None, omega_index=None):
        return x_geo
