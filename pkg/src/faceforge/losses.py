"""Reconstruction (pixel + feature matching) loss and the total objective.

  L_rec = |x - x_hat|_1 + sum_l lambda_l * |psi_l(x) - psi_l(x_hat)|_1
  L     = L_rec + kl_coeff * KL

Feature layers psi come from a pluggable extractor: `identity` (pixels
only), a frozen random-weight conv stack, or an external TorchScript module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .focalbank import FocalBank, boundary_feature, focal_weights
from .prior import kl_additive, kl_mixture_bound, make_prior


class IdentityExtractor:
    """Pixels only: contributes no feature layers."""

    def layers(self, x):
        return []


class RandomConvExtractor(nn.Module):
    """Frozen conv stack with seed-fixed random weights.

    Cheap stand-in for a pretrained perceptual network: deterministic, and
    exercises the multi-layer feature-matching path.
    """

    def __init__(self, seed: int = 0, in_channels: int = 3, widths=(8, 16, 32)):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            convs, prev = [], in_channels
            for wdt in widths:
                convs.append(nn.Conv2d(prev, wdt, 3, stride=2, padding=1))
                prev = wdt
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def layers(self, x):
        feats = []
        h = x
        for conv in self.convs:
            if conv.weight.dtype != x.dtype:
                conv.to(x.dtype)
            h = torch.nn.functional.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats


class ExternalExtractor:
    """TorchScript module returning one feature map or a list of them."""

    def __init__(self, path):
        self.module = torch.jit.load(str(path)).eval()

    def layers(self, x):
        out = self.module(x)
        return list(out) if isinstance(out, (list, tuple)) else [out]


def load_extractor(spec: str, in_channels: int = 3):
    """Parse an extractor spec: identity | random | random:<seed> | external:<path>."""
    if spec == "identity":
        return IdentityExtractor()
    if spec == "random":
        return RandomConvExtractor(0, in_channels)
    if spec.startswith("random:"):
        return RandomConvExtractor(int(spec.split(":", 1)[1]), in_channels)
    if spec.startswith("external:"):
        return ExternalExtractor(spec.split(":", 1)[1])
    raise ValueError(f"unknown extractor spec {spec!r}")


def _feature_terms(x, x_hat, extractor, lambdas):
    """Resolve per-layer weights and distances; returns (lambdas, rec_feat)."""
    fx = extractor.layers(x)
    fy = extractor.layers(x_hat)
    if not fx:
        return (), torch.zeros((), dtype=x.dtype)
    if lambdas is None:
        lambdas = [1.0 / len(fx)] * len(fx)
    if len(lambdas) != len(fx):
        raise ValueError("one lambda per extractor layer required")
    rec_feat = sum(lam * (a - b).abs().mean() for lam, a, b in zip(lambdas, fx, fy))
    return tuple(float(l) for l in lambdas), rec_feat


def reconstruction_loss(x, x_hat, extractor=None, lambdas=None):
    """(pixel L1 mean, lambda-weighted feature L1 sum) as 0-dim tensors."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    rec_l1 = (x - x_hat).abs().mean()
    _, rec_feat = _feature_terms(x, x_hat, extractor or IdentityExtractor(), lambdas)
    return rec_l1, rec_feat


@dataclass
class LossBreakdown:
    rec_l1: float
    rec_feat: float
    kl: float
    total: float
    lambdas: tuple
    kl_coeff: float

    def to_dict(self):
        return {
            "rec_l1": self.rec_l1,
            "rec_feat": self.rec_feat,
            "kl": self.kl,
            "total": self.total,
        }


def batch_focal_weights(boundaries, bank: FocalBank) -> np.ndarray:
    """(B, K) focal weights for a batch of boundary maps (no gradients)."""
    arr = boundaries.detach().cpu().numpy() if isinstance(boundaries, torch.Tensor) else boundaries
    return np.stack(
        [focal_weights(boundary_feature(b, bank.feature_hw), bank) for b in arr]
    )


def total_loss(
    images,
    boundaries,
    model,
    bank: FocalBank,
    extractor=None,
    lambdas=None,
    kl_coeff: float = 1.0,
    include_kl: bool = True,
    noise=None,
    weights=None,
    gmm_prior: bool = False,
    mc_samples: int = 16,
    generator: torch.Generator | None = None,
):
    """Run the full forward pass and assemble the training objective.

    Returns (loss_tensor, LossBreakdown). `weights` may carry precomputed
    (B, K) focal weights; `include_kl=False` keeps the KL term in the report
    but out of the optimized total. KL is summed over latent dimensions and
    averaged over the batch.
    """
    x = images if isinstance(images, torch.Tensor) else torch.as_tensor(images)
    c = boundaries if isinstance(boundaries, torch.Tensor) else torch.as_tensor(boundaries)
    q = model.encode_appearance(x, c)
    y, skips = model.encode_structure(c)
    if noise is None:
        noise = torch.randn(q.mean.shape, generator=generator, dtype=q.mean.dtype)
    z = q.mean + torch.exp(0.5 * q.log_var) * noise
    x_hat = model.decode(z, y, skips)

    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    rec_l1 = (x - x_hat).abs().mean()
    used_lambdas, rec_feat = _feature_terms(x, x_hat, extractor or IdentityExtractor(), lambdas)

    if weights is None:
        weights = batch_focal_weights(c, bank)
    if gmm_prior:
        w = torch.as_tensor(np.asarray(weights), dtype=q.mean.dtype)
        kl = kl_mixture_bound(
            q, w, bank.latent_means, bank.latent_scales, n_samples=mc_samples, generator=generator
        ).mean()
    else:
        prior = make_prior(weights, bank, dtype=q.mean.dtype)
        kl = kl_additive(q, prior).mean()

    coeff = kl_coeff if include_kl else 0.0
    loss = rec_l1 + rec_feat + coeff * kl
    breakdown = LossBreakdown(
        rec_l1=float(rec_l1.detach()),
        rec_feat=float(rec_feat.detach()),
        kl=float(kl.detach()),
        total=float(rec_l1.detach()) + float(rec_feat.detach()) + coeff * float(kl.detach()),
        lambdas=used_lambdas,
        kl_coeff=coeff,
    )
    return loss, breakdown
