"""Network building blocks and the two-branch encoder / skip decoder.

The appearance branch encodes the image into a diagonal-Gaussian posterior
over a spatial latent; the structure branch encodes the boundary map into a
code `y` plus one skip feature per intermediate resolution. The decoder
concatenates z with y and climbs back up, fusing the structure skips and
upsampling with sub-pixel (pixel-shuffle) convolutions.

All convolutions are weight-normalized by default: w = (g / ||v||) * v per
output channel, so ||w|| = |g| independent of the direction parameter v.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .prior import GaussianPosterior


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Rearrange (C*r^2, H, W) to (C, r*H, r*W).

    out[c, h, w] = in[c*r^2 + (h % r)*r + (w % r), h // r, w // r]
    """
    if r < 1:
        raise ValueError("upscale factor must be >= 1")
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    b, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ValueError(f"channel count {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    out = (
        x.reshape(b, co, r, r, h, w)
        .permute(0, 1, 4, 2, 5, 3)
        .reshape(b, co, h * r, w * r)
    )
    return out.squeeze(0) if squeeze else out


def space_to_depth(x: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of pixel_shuffle: (C, r*H, r*W) to (C*r^2, H, W)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    b, c, h, w = x.shape
    if h % r != 0 or w % r != 0:
        raise ValueError("spatial size not divisible by r")
    out = (
        x.reshape(b, c, h // r, r, w // r, r)
        .permute(0, 1, 3, 5, 2, 4)
        .reshape(b, c * r * r, h // r, w // r)
    )
    return out.squeeze(0) if squeeze else out


class WNConv2d(nn.Module):
    """Convolution with weight normalization: w = (g / ||v||) * v."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0):
        super().__init__()
        ref = nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding)
        self.v = nn.Parameter(ref.weight.detach().clone())
        self.g = nn.Parameter(self.v.detach().flatten(1).norm(dim=1).clone())
        self.bias = nn.Parameter(ref.bias.detach().clone())
        self.stride, self.padding = stride, padding

    def effective_weight(self) -> torch.Tensor:
        norm = self.v.flatten(1).norm(dim=1).clamp_min(1e-12)
        return self.v * (self.g / norm).view(-1, 1, 1, 1)

    def forward(self, x):
        return F.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class WNConvTranspose2d(nn.Module):
    """Transposed convolution with the same per-output-channel normalization."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0):
        super().__init__()
        ref = nn.ConvTranspose2d(in_channels, out_channels, kernel_size, stride, padding)
        self.v = nn.Parameter(ref.weight.detach().clone())  # (in, out, kh, kw)
        norms = self.v.detach().permute(1, 0, 2, 3).flatten(1).norm(dim=1)
        self.g = nn.Parameter(norms.clone())
        self.bias = nn.Parameter(ref.bias.detach().clone())
        self.stride, self.padding = stride, padding

    def effective_weight(self) -> torch.Tensor:
        norm = self.v.permute(1, 0, 2, 3).flatten(1).norm(dim=1).clamp_min(1e-12)
        return self.v * (self.g / norm).view(1, -1, 1, 1)

    def forward(self, x):
        return F.conv_transpose2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


@dataclass
class ModelConfig:
    """Architecture hyperparameters; `desk` and `paper` presets provided."""

    input_size: int = 64
    image_channels: int = 3
    boundary_channels: int = 1
    channels: tuple = (32, 64, 128, 256)
    norm: str = "wn"  # wn | bn | none
    upsample: str = "pixel_shuffle"  # pixel_shuffle | transposed
    block: str = "residual"  # residual | plain
    appearance_sees_boundary: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.norm not in ("wn", "bn", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.upsample not in ("pixel_shuffle", "transposed"):
            raise ValueError(f"unknown upsample {self.upsample!r}")
        if self.block not in ("residual", "plain"):
            raise ValueError(f"unknown block {self.block!r}")
        if self.input_size % (2**self.n_downsamples) != 0 or self.latent_grid < 1:
            raise ValueError("input_size must be divisible by 2^n_downsamples")

    @property
    def n_downsamples(self) -> int:
        return len(self.channels)

    @property
    def latent_grid(self) -> int:
        return self.input_size >> self.n_downsamples

    @property
    def latent_channels(self) -> int:
        return self.channels[-1]

    @property
    def d_z(self) -> int:
        return self.latent_channels * self.latent_grid**2

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(input_size=256, channels=(64, 128, 256, 512, 512, 512))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def make_conv(cfg: ModelConfig, in_ch, out_ch, kernel_size=3, stride=1, padding=1):
    if cfg.norm == "wn":
        return WNConv2d(in_ch, out_ch, kernel_size, stride, padding)
    return nn.Conv2d(in_ch, out_ch, kernel_size, stride, padding)


class DownBlock(nn.Module):
    """One encoder level: 3x3 conv + PReLU + 2x pool, optional residual shortcut."""

    def __init__(self, cfg: ModelConfig, in_ch, out_ch):
        super().__init__()
        self.conv = make_conv(cfg, in_ch, out_ch)
        self.bn = nn.BatchNorm2d(out_ch) if cfg.norm == "bn" else None
        self.act = nn.PReLU(out_ch)
        self.pool = nn.AvgPool2d(2)
        self.shortcut = None
        if cfg.block == "residual":
            self.shortcut = make_conv(cfg, in_ch, out_ch, kernel_size=1, stride=2, padding=0)

    def forward(self, x):
        h = self.conv(x)
        if self.bn is not None:
            h = self.bn(h)
        h = self.pool(self.act(h))
        if self.shortcut is not None:
            h = h + self.shortcut(x)
        return h


class Encoder(nn.Module):
    """Downsampling trunk; optionally adds posterior heads over the final grid.

    Returns (code, skips) or (posterior, skips): `skips` holds the feature of
    every level except the deepest, ordered shallow to deep.
    """

    def __init__(self, cfg: ModelConfig, in_channels: int, posterior: bool):
        super().__init__()
        self.cfg = cfg
        self.posterior = posterior
        chans = (in_channels,) + cfg.channels
        self.blocks = nn.ModuleList(
            DownBlock(cfg, chans[i], chans[i + 1]) for i in range(cfg.n_downsamples)
        )
        if posterior:
            head_cfg = cfg if cfg.norm != "bn" else ModelConfig(**{**cfg.to_dict(), "norm": "none"})
            self.mu_head = make_conv(head_cfg, cfg.latent_channels, cfg.latent_channels)
            self.logvar_head = make_conv(head_cfg, cfg.latent_channels, cfg.latent_channels)

    def forward(self, x):
        if x.shape[-2:] != (self.cfg.input_size, self.cfg.input_size):
            raise ValueError(
                f"expected {self.cfg.input_size}x{self.cfg.input_size} input, got {tuple(x.shape[-2:])}"
            )
        skips = []
        h = x
        for block in self.blocks:
            h = block(h)
            skips.append(h)
        code = skips.pop()
        if not self.posterior:
            return code, skips
        b = code.shape[0]
        mu = self.mu_head(code).reshape(b, -1)
        log_var = self.logvar_head(code).reshape(b, -1)
        return GaussianPosterior(mu, log_var), skips


class UpBlock(nn.Module):
    """One decoder level: conv (+act) then 2x upsample, then skip concat outside."""

    def __init__(self, cfg: ModelConfig, in_ch, out_ch):
        super().__init__()
        if cfg.upsample == "pixel_shuffle":
            self.conv = make_conv(cfg, in_ch, 4 * out_ch)
            self.act = nn.PReLU(4 * out_ch)
            self.shuffle = True
        else:
            self.conv = (
                WNConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)
                if cfg.norm == "wn"
                else nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)
            )
            self.act = nn.PReLU(out_ch)
            self.shuffle = False

    def forward(self, x):
        h = self.act(self.conv(x))
        return pixel_shuffle(h, 2) if self.shuffle else h


class Decoder(nn.Module):
    """Climb from the latent grid back to image resolution, fusing skips."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        skip_chans = list(cfg.channels[:-1])[::-1]  # deep to shallow
        self.skip_chans = skip_chans
        ups = []
        cur = 2 * cfg.latent_channels  # concat(z, y)
        for sc in skip_chans:
            ups.append(UpBlock(cfg, cur, sc))
            cur = 2 * sc  # after skip concat
        self.ups = nn.ModuleList(ups)
        if cfg.upsample == "pixel_shuffle":
            self.final = make_conv(cfg, cur, 4 * cfg.image_channels)
            self.final_shuffle = True
        else:
            self.final = (
                WNConvTranspose2d(cur, cfg.image_channels, 4, stride=2, padding=1)
                if cfg.norm == "wn"
                else nn.ConvTranspose2d(cur, cfg.image_channels, 4, stride=2, padding=1)
            )
            self.final_shuffle = False

    def forward(self, z_grid, y, skips):
        if len(skips) != len(self.ups):
            raise ValueError(f"expected {len(self.ups)} skip levels, got {len(skips)}")
        h = torch.cat([z_grid, y], dim=1)
        for up, skip in zip(self.ups, reversed(skips)):
            h = up(h)
            if skip.shape[1:] != h.shape[1:]:
                raise ValueError(
                    f"skip shape {tuple(skip.shape[1:])} does not match decoder state "
                    f"{tuple(h.shape[1:])}"
                )
            h = torch.cat([h, skip], dim=1)
        h = self.final(h)
        if self.final_shuffle:
            h = pixel_shuffle(h, 2)
        return torch.sigmoid(h)


class FaceVAE(nn.Module):
    """Two-branch conditional VAE over (image, boundary) pairs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        app_in = cfg.image_channels + (cfg.boundary_channels if cfg.appearance_sees_boundary else 0)
        self.appearance_encoder = Encoder(cfg, app_in, posterior=True)
        self.structure_encoder = Encoder(cfg, cfg.boundary_channels, posterior=False)
        self.decoder = Decoder(cfg)

    def encode_appearance(self, x, c=None) -> GaussianPosterior:
        if self.cfg.appearance_sees_boundary:
            if c is None:
                raise ValueError("this config conditions the appearance encoder on the boundary")
            x = torch.cat([x, c], dim=1)
        q, _ = self.appearance_encoder(x)
        return q

    def encode_structure(self, c):
        return self.structure_encoder(c)

    def latent_to_grid(self, z: torch.Tensor) -> torch.Tensor:
        g = self.cfg.latent_grid
        return z.reshape(z.shape[0], self.cfg.latent_channels, g, g)

    def decode(self, z, y, skips) -> torch.Tensor:
        if z.ndim == 2:
            z = self.latent_to_grid(z)
        return self.decoder(z, y, skips)

    def forward(self, x, c, noise=None):
        q = self.encode_appearance(x, c)
        y, skips = self.encode_structure(c)
        z = q.mean if noise is None else q.mean + torch.exp(0.5 * q.log_var) * noise
        return self.decode(z, y, skips), q


def build_model(cfg: ModelConfig, seed: int = 0) -> FaceVAE:
    """Construct a FaceVAE with parameters drawn from a forked, seeded RNG."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return FaceVAE(cfg)


def parameter_shapes(model: nn.Module) -> dict[str, tuple]:
    return {name: tuple(p.shape) for name, p in model.named_parameters()}
