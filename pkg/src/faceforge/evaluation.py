"""Quantitative metrics: FID, Inception Score, histogram entropy, and the
boundary-consistency disentanglement score.

The feature embedder is pluggable. The default is a frozen random-weight
conv stack (deterministic, dependency-free); an external TorchScript module
returning (features, logits) can be supplied for paper-comparable numbers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .geometry import landmark_distance, render_boundary
from .synth import SyntheticFaceSpec, fit_structure, synth_landmarks


def _sqrtm_psd(m: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigen decomposition.

    Eigenvalues in [-tol, 0) are clipped to 0; anything more negative is a
    genuinely non-PSD input and raises.
    """
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    if vals.min() < -tol:
        raise ValueError(f"matrix is not PSD (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians given their statistics."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    if not (
        np.isfinite(mu_a).all()
        and np.isfinite(mu_b).all()
        and np.isfinite(cov_a).all()
        and np.isfinite(cov_b).all()
    ):
        raise ValueError("non-finite statistics")
    sqrt_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(sqrt_a @ cov_b @ sqrt_a)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets (N x d, M x d)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be N x d and M x d with matching d")
    d = a.shape[1]
    if min(len(a), len(b)) <= d:
        warnings.warn(f"fewer samples than feature dimension ({len(a)}, {len(b)} vs d={d})")
    cov_a = np.cov(a, rowvar=False) if len(a) > 1 else np.zeros((d, d))
    cov_b = np.cov(b, rowvar=False) if len(b) > 1 else np.zeros((d, d))
    return fid_from_stats(a.mean(0), np.atleast_2d(cov_a), b.mean(0), np.atleast_2d(cov_b))


def inception_score(class_probs: np.ndarray) -> float:
    """exp of the mean KL between per-sample class posteriors and their marginal."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("class_probs must be N x C")
    if (p < 0).any() or not np.allclose(p.sum(1), 1.0, atol=1e-5):
        raise ValueError("rows must be probability vectors")
    marginal = p.mean(0)
    ratio = np.zeros_like(p)
    nz = p > 0
    ratio[nz] = np.log(p[nz]) - np.log(marginal)[np.broadcast_to(marginal > 0, p.shape) & nz]
    kl = (p * ratio).sum(1)
    return float(np.exp(kl.mean()))


def histogram_entropy(image: np.ndarray, bins: int = 256) -> float:
    """Shannon entropy (bits) of the luminance histogram; luminance = channel mean."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty image")
    if arr.ndim == 3:
        arr = arr.mean(0 if arr.shape[0] in (1, 3) else -1)
    counts, _ = np.histogram(arr, bins=bins, range=(0.0, 1.0))
    probs = counts[counts > 0] / counts.sum()
    return float(-(probs * np.log2(probs)).sum())


class RandomEmbedder(nn.Module):
    """Frozen random conv net: image batch -> (features N x d, class probs N x C)."""

    def __init__(self, seed: int = 0, in_channels: int = 3, d: int = 64, classes: int = 8):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.stack = nn.Sequential(
                nn.Conv2d(in_channels, 16, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(32, 64, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.AdaptiveAvgPool2d(4),
                nn.Flatten(),
            )
            self.feature_head = nn.Linear(64 * 16, d)
            self.class_head = nn.Linear(64 * 16, classes)
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def forward(self, images):
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        h = self.stack(x)
        return self.feature_head(h), torch.softmax(self.class_head(h), dim=1)


class ExternalEmbedder:
    """TorchScript module mapping an image batch to (features, logits)."""

    def __init__(self, path):
        self.module = torch.jit.load(str(path)).eval()

    @torch.no_grad()
    def __call__(self, images):
        out = self.module(torch.as_tensor(np.asarray(images), dtype=torch.float32))
        if not (isinstance(out, (tuple, list)) and len(out) == 2):
            raise ValueError("external embedder must return (features, logits)")
        return out[0], torch.softmax(out[1], dim=1)


def load_embedder(spec: str, in_channels: int = 3):
    if spec == "random":
        return RandomEmbedder(0, in_channels)
    if spec.startswith("random:"):
        return RandomEmbedder(int(spec.split(":", 1)[1]), in_channels)
    if spec.startswith("external:"):
        return ExternalEmbedder(spec.split(":", 1)[1])
    raise ValueError(f"unknown embedder spec {spec!r}")


@dataclass
class MetricReport:
    fid: float
    is_score: float
    entropy: float
    boundary_consistency: float
    n_pairs: int = 0
    n_missing: int = 0

    def to_dict(self):
        return asdict(self)


def manipulate_image(model, source_image, target_lms, boundary_mode="single", blur_sigma=1.0, noise=None):
    """Decode source appearance under a target boundary; returns (3, H, W) float32."""
    x = torch.as_tensor(np.asarray(source_image, dtype=np.float32)).unsqueeze(0)
    bnd = render_boundary(target_lms, mode=boundary_mode, blur_sigma=blur_sigma).as_channels()
    c = torch.as_tensor(bnd).unsqueeze(0)
    with torch.no_grad():
        q = model.encode_appearance(x, c)
        y, skips = model.encode_structure(c)
        z = q.mean if noise is None else q.mean + torch.exp(0.5 * q.log_var) * noise
        out = model.decode(z, y, skips)
    return out.squeeze(0).numpy()


# Template fits worse than this mean-L1 residual count as extraction failures.
EXTRACTION_RESIDUAL_LIMIT = 0.25


def boundary_consistency(
    model,
    source_image,
    source_lms,
    target_lms,
    face_spec: SyntheticFaceSpec,
    size,
    boundary_mode: str = "single",
    blur_sigma: float = 1.0,
):
    """dist(extracted, target) - dist(extracted, source); negative when the
    generated face follows the target structure. Returns None when landmark
    extraction fails (template residual above EXTRACTION_RESIDUAL_LIMIT).
    """
    gen = manipulate_image(model, source_image, target_lms, boundary_mode, blur_sigma)
    fitted, residual = fit_structure(gen.transpose(1, 2, 0), face_spec, size)
    if residual > EXTRACTION_RESIDUAL_LIMIT:
        return None
    extracted = synth_landmarks(fitted, size)
    return landmark_distance(extracted, target_lms) - landmark_distance(extracted, source_lms)


def evaluate_model(
    model,
    corpus,
    n_pairs: int = 50,
    embedder="random",
    seed: int = 0,
    split: str = "test",
    boundary_mode: str = "single",
    blur_sigma: float = 1.0,
) -> MetricReport:
    """Generate manipulated pairs from `split` and score them.

    FID compares embedded real vs generated images; IS and entropy are taken
    over the generated set; boundary consistency averages the per-pair score.
    """
    if isinstance(embedder, str):
        embedder = load_embedder(embedder)
    recs = corpus.split_records(split)
    if len(recs) < 2:
        raise ValueError(f"need at least 2 '{split}' records")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        i, j = rng.choice(len(recs), size=2, replace=False)
        pairs.append((recs[i], recs[j]))

    generated, scores, missing = [], [], 0
    for src, tgt in pairs:
        img = corpus.load_image(src)
        gen = manipulate_image(model, img, tgt.landmarks, boundary_mode, blur_sigma)
        generated.append(gen)
        if src.face_spec is None:
            missing += 1
            continue
        score = boundary_consistency(
            model, img, src.landmarks, tgt.landmarks, src.face_spec, corpus.size,
            boundary_mode, blur_sigma,
        )
        if score is None:
            missing += 1
        else:
            scores.append(score)

    real = np.stack([corpus.load_image(r) for r in recs])
    gen_arr = np.stack(generated)
    feats_real, _ = embedder(real)
    feats_gen, probs_gen = embedder(gen_arr)
    report = MetricReport(
        fid=fid(feats_real.numpy(), feats_gen.numpy()),
        is_score=inception_score(probs_gen.numpy()),
        entropy=float(np.mean([histogram_entropy(g) for g in gen_arr])),
        boundary_consistency=float(np.mean(scores)) if scores else float("nan"),
        n_pairs=n_pairs,
        n_missing=missing,
    )
    return report
