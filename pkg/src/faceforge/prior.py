"""Latent prior and posterior math.

The conditional prior over the appearance code is an isotropic Gaussian
whose mean is the focal-weighted combination of the bank's latent means:

  p(z | w) = N(sum_k w_k mu_k, sigma^2 I),  sigma^2 = sum_k w_k^2 sigma_k^2

Against a diagonal-Gaussian posterior q = N(mu_q, diag(exp(log_var))) the
KL divergence has the per-dimension closed form

  log(sigma / sigma_q) + (sigma_q^2 + (mu_q - mean)^2) / (2 sigma^2) - 1/2

summed over latent dimensions. A Monte Carlo bound against the full
Gaussian-mixture prior is kept as the ablation comparator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .focalbank import FocalBank


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.get_default_dtype())


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian q(z|x, y): mean and log-variance, shape (..., d_z)."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        self.mean = _as_tensor(self.mean)
        self.log_var = _as_tensor(self.log_var, dtype=self.mean.dtype)
        if self.mean.shape != self.log_var.shape:
            raise ValueError("mean and log_var shapes differ")

    @property
    def d_z(self) -> int:
        return self.mean.shape[-1]


@dataclass
class AdditiveFocalPrior:
    """Isotropic Gaussian prior: mean (..., d_z) and scalar variance (...,)."""

    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self):
        self.mean = _as_tensor(self.mean)
        self.var = _as_tensor(self.var, dtype=self.mean.dtype)
        if not bool((self.var > 0).all()):
            raise ValueError("prior variance must be positive")

    @property
    def d_z(self) -> int:
        return self.mean.shape[-1]


def make_prior(w, bank: FocalBank, dtype=None, device=None) -> AdditiveFocalPrior:
    """Fold focal weights into prior parameters.

    `w` is a (K,) or (B, K) weight vector; the result broadcasts accordingly.
    """
    wt = _as_tensor(w, dtype=dtype)
    if wt.shape[-1] != bank.k:
        raise ValueError(f"expected {bank.k} weights, got {wt.shape[-1]}")
    mu = torch.as_tensor(bank.latent_means, dtype=wt.dtype)
    scales = torch.as_tensor(bank.latent_scales, dtype=wt.dtype)
    if device is not None:
        wt, mu, scales = wt.to(device), mu.to(device), scales.to(device)
    mean = wt @ mu
    var = (wt**2 * scales**2).sum(-1)
    return AdditiveFocalPrior(mean, var)


def kl_additive(q: GaussianPosterior, p: AdditiveFocalPrior) -> torch.Tensor:
    """Closed-form KL(q || p), summed over latent dimensions.

    Returns a scalar for single-sample inputs, a (B,) vector for batched ones.
    Differentiable with respect to the posterior parameters.
    """
    if not (
        torch.isfinite(q.mean).all()
        and torch.isfinite(q.log_var).all()
        and torch.isfinite(p.mean).all()
        and torch.isfinite(p.var).all()
    ):
        raise ValueError("non-finite inputs to kl_additive")
    var_p = p.var.unsqueeze(-1) if p.var.ndim == q.mean.ndim - 1 else p.var
    per_dim = (
        0.5 * (torch.log(var_p) - q.log_var)
        + (torch.exp(q.log_var) + (q.mean - p.mean) ** 2) / (2.0 * var_p)
        - 0.5
    )
    return per_dim.sum(-1)


def sample(q: GaussianPosterior, noise) -> torch.Tensor:
    """Reparameterized draw: z = mean + exp(log_var / 2) * noise."""
    eps = _as_tensor(noise, dtype=q.mean.dtype)
    return q.mean + torch.exp(0.5 * q.log_var) * eps


def _diag_gaussian_log_prob(z, mean, log_var):
    return -0.5 * (np.log(2 * np.pi) + log_var + (z - mean) ** 2 / torch.exp(log_var)).sum(-1)


def kl_mixture_bound(
    q: GaussianPosterior,
    weights,
    means,
    scales,
    n_samples: int = 16,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Monte Carlo estimate of KL(q || GMM) with reparameterized samples.

    `weights` (K,), `means` (K, d_z), `scales` (K,) describe the mixture
    p(z) = sum_k w_k N(mu_k, sigma_k^2 I). Estimates
    E_q[log q(z) - log p(z)] over `n_samples` draws.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    w = _as_tensor(weights, dtype=q.mean.dtype)
    mu = _as_tensor(means, dtype=q.mean.dtype)
    sc = _as_tensor(scales, dtype=q.mean.dtype)
    mean, log_var = q.mean, q.log_var
    batched = mean.ndim == 2
    if not batched:
        mean, log_var = mean.unsqueeze(0), log_var.unsqueeze(0)
        w = w.unsqueeze(0) if w.ndim == 1 else w
    if w.ndim == 1:
        w = w.unsqueeze(0).expand(mean.shape[0], -1)
    d_z = mean.shape[-1]
    eps = torch.randn((n_samples,) + mean.shape, generator=generator, dtype=mean.dtype)
    z = mean.unsqueeze(0) + torch.exp(0.5 * log_var).unsqueeze(0) * eps  # (S, B, d)
    log_q = _diag_gaussian_log_prob(z, mean.unsqueeze(0), log_var.unsqueeze(0))
    # mixture log prob: (S, B, K)
    diff = z.unsqueeze(2) - mu.view(1, 1, -1, d_z)
    comp = -0.5 * (
        d_z * np.log(2 * np.pi)
        + d_z * 2.0 * torch.log(sc).view(1, 1, -1)
        + (diff**2).sum(-1) / sc.view(1, 1, -1) ** 2
    )
    log_p = torch.logsumexp(torch.log(w).unsqueeze(0) + comp, dim=-1)
    est = (log_q - log_p).mean(0)
    return est if batched else est.squeeze(0)
