"""Focal-point memory: K-means centroids over boundary features.

The bank clusters flattened (downsampled) training boundary maps; each
centroid is a focal point standing for a distinctive geometry. A boundary's
focal-indexed feature w(b) collects its normalized cosine similarities to
all focal points:

  s_k = (1 + cos(b, centroid_k)) / 2,   w_k = s_k / sum_j s_j

so w is nonnegative and sums to 1. Each focal point also carries a latent
mean (random unit vector) and a positive scale used by the latent prior.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import BoundaryMap

DEFAULT_FEATURE_HW = (32, 32)


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K, D)
    labels: np.ndarray  # (N,)
    inertia: float
    inertia_history: list[float]
    n_iter: int


def kmeans(features: np.ndarray, k: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-6):
    """Lloyd iterations with k-means++ seeding.

    Stops when the largest centroid shift drops below `tol` or after
    `max_iters`. Empty clusters are re-seeded from the point farthest from
    its assigned centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < k:
        raise ValueError(f"kmeans needs at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(1))

    labels = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    for it in range(max_iters):
        dist2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        labels = dist2.argmin(1)
        history.append(float(dist2[np.arange(n), labels].sum()))
        new_centroids = centroids.copy()
        point_d2 = dist2[np.arange(n), labels]
        for j in range(k):
            mask = labels == j
            if mask.any():
                new_centroids[j] = x[mask].mean(0)
            else:
                far = int(point_d2.argmax())
                new_centroids[j] = x[far]
                labels[far] = j
                point_d2[far] = 0.0
        shift = float(np.linalg.norm(new_centroids - centroids, axis=1).max())
        centroids = new_centroids
        if shift < tol:
            break
    dist2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    labels = dist2.argmin(1)
    inertia = float(dist2[np.arange(n), labels].sum())
    history.append(inertia)
    return KMeansResult(centroids, labels, inertia, history, len(history) - 1)


def init_latent_means(k: int, d_z: int, seed: int = 0) -> np.ndarray:
    """K unit-norm rows sampled from a standard normal; deterministic under seed."""
    if d_z < 1:
        raise ValueError("d_z must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((k, d_z))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    while (norms == 0).any():  # essentially impossible, but keep the invariant airtight
        v[norms[:, 0] == 0] = rng.standard_normal((int((norms == 0).sum()), d_z))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norms


@dataclass
class FocalBank:
    centroids: np.ndarray  # (K, D) boundary-feature space
    latent_means: np.ndarray  # (K, d_z), unit rows
    latent_scales: np.ndarray  # (K,), positive
    feature_hw: tuple[int, int] = DEFAULT_FEATURE_HW
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.latent_means = np.asarray(self.latent_means, dtype=np.float64)
        self.latent_scales = np.asarray(self.latent_scales, dtype=np.float64)
        if not (self.latent_scales > 0).all():
            raise ValueError("latent scales must be positive")
        norms = np.linalg.norm(self.latent_means, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("latent means must be unit-norm")
        k = len(self.centroids)
        for i in range(k):
            for j in range(i + 1, k):
                if np.array_equal(self.centroids[i], self.centroids[j]):
                    raise ValueError(f"centroids {i} and {j} coincide")

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def d_z(self) -> int:
        return self.latent_means.shape[1]

    def save(self, path) -> None:
        np.savez(
            path,
            centroids=self.centroids,
            latent_means=self.latent_means,
            latent_scales=self.latent_scales,
            feature_hw=np.asarray(self.feature_hw),
        )

    @classmethod
    def load(cls, path) -> "FocalBank":
        with np.load(path) as z:
            return cls(
                centroids=z["centroids"],
                latent_means=z["latent_means"],
                latent_scales=z["latent_scales"],
                feature_hw=tuple(int(v) for v in z["feature_hw"]),
            )

    def state_dict(self) -> dict:
        return {
            "centroids": self.centroids,
            "latent_means": self.latent_means,
            "latent_scales": self.latent_scales,
            "feature_hw": tuple(self.feature_hw),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "FocalBank":
        return cls(**state)


def boundary_feature(b, feature_hw: tuple[int, int] = DEFAULT_FEATURE_HW) -> np.ndarray:
    """Flatten a boundary map to the clustering feature space (downsampled)."""
    pixels = b.pixels if isinstance(b, BoundaryMap) else np.asarray(b, dtype=np.float32)
    if pixels.ndim == 3:  # per-group channels: collapse to the union map
        pixels = pixels.max(0)
    h, w = pixels.shape
    fh, fw = feature_hw
    if h % fh == 0 and w % fw == 0:
        feat = pixels.reshape(fh, h // fh, fw, w // fw).mean(axis=(1, 3))
    else:
        im = Image.fromarray(pixels.astype(np.float32), mode="F").resize((fw, fh), Image.BILINEAR)
        feat = np.asarray(im)
    return feat.reshape(-1).astype(np.float64)


def focal_weights(b, bank: FocalBank) -> np.ndarray:
    """Focal indexed feature w(b): normalized shifted-cosine similarities."""
    if isinstance(b, BoundaryMap):
        feat = boundary_feature(b, bank.feature_hw)
    else:
        feat = np.asarray(b, dtype=np.float64)
        if feat.ndim != 1:
            feat = boundary_feature(feat, bank.feature_hw)
    if feat.shape != (bank.centroids.shape[1],):
        raise ValueError(
            f"feature dimension {feat.shape} does not match centroids {bank.centroids.shape}"
        )
    norm = np.linalg.norm(feat)
    if norm == 0:
        warnings.warn("zero boundary feature; falling back to uniform focal weights")
        return np.full(bank.k, 1.0 / bank.k)
    cnorms = np.linalg.norm(bank.centroids, axis=1)
    cos = np.zeros(bank.k)
    nz = cnorms > 0
    cos[nz] = (bank.centroids[nz] @ feat) / (cnorms[nz] * norm)
    s = (1.0 + cos) / 2.0
    return s / s.sum()


def build_focal_bank(
    corpus,
    k: int = 8,
    d_z: int = 4096,
    seed: int = 0,
    feature_hw: tuple[int, int] = DEFAULT_FEATURE_HW,
    boundary_mode: str = "single",
    blur_sigma: float = 1.0,
    latent_scale: float = 1.0,
    max_iters: int = 100,
) -> FocalBank:
    """Cluster all training boundaries and attach latent means/scales."""
    feats = np.stack(
        [
            boundary_feature(corpus.load_boundary(r, boundary_mode, blur_sigma), feature_hw)
            for r in corpus.split_records("train")
        ]
    )
    result = kmeans(feats, k, seed=seed, max_iters=max_iters)
    return FocalBank(
        centroids=result.centroids,
        latent_means=init_latent_means(k, d_z, seed=seed),
        latent_scales=np.full(k, float(latent_scale)),
        feature_hw=feature_hw,
        meta={"inertia": result.inertia, "n_train": len(feats), "seed": seed},
    )


def cluster_montage(bank: FocalBank, path) -> None:
    """Write a horizontal strip of the centroid images for quick inspection."""
    fh, fw = bank.feature_hw
    tiles = []
    for c in bank.centroids:
        tile = c.reshape(fh, fw)
        peak = tile.max()
        tiles.append(tile / peak if peak > 0 else tile)
    strip = np.concatenate(tiles, axis=1)
    Image.fromarray(np.clip(strip * 255.0, 0, 255).astype(np.uint8)).save(path)
