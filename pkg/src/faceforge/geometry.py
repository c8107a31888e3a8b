"""Facial landmarks and boundary-map rendering.

A landmark set is an ordered list of (x, y) pixel coordinates partitioned
into named facial groups. Its boundary map is produced by interpolating each
group with a Catmull-Rom spline, rasterizing the curve as an anti-aliased
polyline (unit-width tent profile around the curve), blurring with a Gaussian
and renormalizing the peak intensity to 1.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

# Canonical group order for synthetic faces. Groups whose name appears in
# CLOSED_GROUPS are interpolated as closed loops.
GROUP_NAMES = (
    "contour",
    "left_brow",
    "right_brow",
    "left_eye",
    "right_eye",
    "nose",
    "mouth_outer",
    "mouth_inner",
)
CLOSED_GROUPS = frozenset({"contour", "left_eye", "right_eye", "mouth_outer", "mouth_inner"})

# Dense spline sampling: target spacing between consecutive polyline vertices.
_SAMPLE_SPACING = 0.25


@dataclass
class LandmarkSet:
    """Ordered 2D landmarks with named group ranges.

    points: (N, 2) float array of (x, y) pixel coordinates.
    groups: mapping name -> (start, end) index range; the ranges must tile a
        prefix of the point list and each must contain at least 2 points.
    image_size: (H, W) in pixels; every point must lie in [0, W) x [0, H).
    """

    points: np.ndarray
    groups: dict[str, tuple[int, int]] = field(default_factory=dict)
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"points must be (N, 2), got {self.points.shape}")
        h, w = self.image_size
        x, y = self.points[:, 0], self.points[:, 1]
        if len(self.points) and not (
            (x >= 0).all() and (x < w).all() and (y >= 0).all() and (y < h).all()
        ):
            raise ValueError("landmarks out of image bounds")
        cursor = 0
        for name, (start, end) in self.groups.items():
            if start != cursor:
                raise ValueError(f"group '{name}' does not start at index {cursor}")
            if end - start < 2:
                raise ValueError(f"group '{name}' has fewer than 2 points")
            cursor = end
        if cursor > len(self.points):
            raise ValueError("group ranges exceed point list")

    def group_points(self, name: str) -> np.ndarray:
        start, end = self.groups[name]
        return self.points[start:end]

    def translated(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet(self.points + np.array([dx, dy]), dict(self.groups), self.image_size)


@dataclass
class BoundaryMap:
    """Rasterized facial-structure image; (H, W) or (G, H, W), values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim not in (2, 3):
            raise ValueError("boundary map must be (H, W) or (G, H, W)")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[-2], self.pixels.shape[-1]

    @property
    def n_channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[0]

    def as_channels(self) -> np.ndarray:
        """Pixels with an explicit channel axis, (C, H, W)."""
        return self.pixels[None] if self.pixels.ndim == 2 else self.pixels


def catmull_rom(points: np.ndarray, closed: bool, spacing: float = _SAMPLE_SPACING) -> np.ndarray:
    """Densely sample a uniform Catmull-Rom spline through `points`.

    Open curves clamp the end tangents by duplicating the endpoints; closed
    curves wrap around. Returns an (M, 2) polyline whose vertex spacing is
    roughly `spacing` pixels.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points for a spline")
    if closed:
        ctrl = np.vstack([pts[-1:], pts, pts[:2]])
        n_seg = n
    else:
        ctrl = np.vstack([pts[:1], pts, pts[-1:]])
        n_seg = n - 1
    out = []
    for i in range(n_seg):
        p0, p1, p2, p3 = ctrl[i], ctrl[i + 1], ctrl[i + 2], ctrl[i + 3]
        chord = float(np.linalg.norm(p2 - p1))
        steps = max(2, int(np.ceil(chord / spacing)) + 1)
        t = np.linspace(0.0, 1.0, steps)[:, None]
        t2, t3 = t * t, t * t * t
        seg = 0.5 * (
            (2 * p1)
            + (-p0 + p2) * t
            + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2
            + (-p0 + 3 * p1 - 3 * p2 + p3) * t3
        )
        out.append(seg if i == n_seg - 1 else seg[:-1])
    return np.vstack(out)


def _rasterize_polyline(canvas: np.ndarray, poly: np.ndarray) -> None:
    """Draw an anti-aliased unit-width polyline: intensity = max(0, 1 - dist)."""
    h, w = canvas.shape
    for a, b in zip(poly[:-1], poly[1:]):
        x0 = max(int(np.floor(min(a[0], b[0]))) - 1, 0)
        x1 = min(int(np.ceil(max(a[0], b[0]))) + 1, w - 1)
        y0 = max(int(np.floor(min(a[1], b[1]))) - 1, 0)
        y1 = min(int(np.ceil(max(a[1], b[1]))) + 1, h - 1)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        d = b - a
        len2 = float(d @ d)
        px, py = xs - a[0], ys - a[1]
        if len2 == 0.0:
            dist = np.hypot(px, py)
        else:
            t = np.clip((px * d[0] + py * d[1]) / len2, 0.0, 1.0)
            dist = np.hypot(px - t * d[0], py - t * d[1])
        patch = np.clip(1.0 - dist, 0.0, None)
        np.maximum(canvas[y0 : y1 + 1, x0 : x1 + 1], patch, out=canvas[y0 : y1 + 1, x0 : x1 + 1])


def _render_group(canvas: np.ndarray, pts: np.ndarray, closed: bool, group: str) -> None:
    if np.allclose(pts, pts[0]):
        warnings.warn(f"group '{group}' is degenerate (all points coincide); rendering a dot")
        _rasterize_polyline(canvas, np.vstack([pts[:1], pts[:1]]))
        return
    _rasterize_polyline(canvas, catmull_rom(pts, closed))


def render_boundary(lms: LandmarkSet, mode: str = "single", blur_sigma: float = 1.0) -> BoundaryMap:
    """Render the boundary map of a landmark set.

    mode "single" max-composites all groups into one channel; "per-group"
    keeps one channel per group. Each channel is blurred with `blur_sigma`
    and renormalized so its peak intensity is 1 (when non-empty).
    """
    if mode not in ("single", "per-group"):
        raise ValueError(f"unknown boundary mode: {mode!r}")
    h, w = lms.image_size
    names = list(lms.groups)
    if mode == "per-group":
        channels = np.zeros((len(names), h, w), dtype=np.float64)
        for ch, name in enumerate(names):
            start, end = lms.groups[name]
            _render_group(channels[ch], lms.points[start:end], name in CLOSED_GROUPS, name)
    else:
        channels = np.zeros((1, h, w), dtype=np.float64)
        for name in names:
            start, end = lms.groups[name]
            _render_group(channels[0], lms.points[start:end], name in CLOSED_GROUPS, name)
    for ch in range(channels.shape[0]):
        if blur_sigma > 0:
            channels[ch] = gaussian_filter(channels[ch], sigma=blur_sigma, mode="constant")
        peak = channels[ch].max()
        if peak > 0:
            channels[ch] /= peak
    pixels = channels[0] if mode == "single" else channels
    return BoundaryMap(pixels.astype(np.float32))


def landmark_distance(a: LandmarkSet, b: LandmarkSet) -> float:
    """Mean Euclidean distance over corresponding points, normalized by the image diagonal."""
    if len(a.points) != len(b.points):
        raise ValueError(f"point count mismatch: {len(a.points)} vs {len(b.points)}")
    if list(a.groups) != list(b.groups):
        raise ValueError("group tables differ")
    h, w = a.image_size
    diag = float(np.hypot(h, w))
    return float(np.linalg.norm(a.points - b.points, axis=1).mean() / diag)


def landmark_record(lms: LandmarkSet, identity: int, image: str, **extra) -> dict:
    """Serializable record: identity, image path, flat x,y floats, group table."""
    rec = {
        "identity": int(identity),
        "image": image,
        "points": [float(v) for v in lms.points.reshape(-1)],
        "groups": {k: [int(s), int(e)] for k, (s, e) in lms.groups.items()},
        "size": [int(lms.image_size[0]), int(lms.image_size[1])],
    }
    rec.update(extra)
    return rec


def landmarks_from_record(rec: dict) -> LandmarkSet:
    pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 2)
    groups = {k: (int(s), int(e)) for k, (s, e) in rec["groups"].items()}
    return LandmarkSet(pts, groups, (int(rec["size"][0]), int(rec["size"][1])))


def write_landmark_file(path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_landmark_file(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
