"""Procedural synthetic faces for desk-scale experiments.

Every face is rendered deterministically from a `SyntheticFaceSpec`. The
landmark layout is a closed-form function of the structure fields only:

  face frame   cx = W/2, cy = 0.54*H, rx = 0.26*W*scale, ry = 0.34*H*scale
  placement    x = cx + rx * u', y = cy + ry * v   for feature anchors (u, v)
  yaw warp     u' = u + 0.30 * yaw * (1 - u^2)     (contour is yaw-invariant)
  mouth        half-height v-units = 0.055 + 0.045 * expression
  brows        baseline v-units   = -0.44 - 0.06 * expression

Appearance fields (skin, hair, texture seed) choose a small fixed palette of
fill colors and freckle positions; they never move a landmark.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .geometry import GROUP_NAMES, LandmarkSet

# Landmark formula constants (see module docstring).
FACE_RX, FACE_RY = 0.26, 0.34
FACE_CY = 0.54
YAW_SHIFT = 0.30
MOUTH_V = 0.50
MOUTH_HALF_W_BASE, MOUTH_HALF_W_GAIN = 0.28, -0.04
MOUTH_HALF_H_BASE, MOUTH_HALF_H_GAIN = 0.055, 0.045
BROW_V_BASE, BROW_V_GAIN, BROW_ARCH = -0.44, -0.06, 0.05
EYE_U, EYE_V, EYE_RU, EYE_RV = 0.33, -0.20, 0.13, 0.07

BACKGROUND = np.array([0.18, 0.19, 0.23])
SCLERA = np.array([0.93, 0.93, 0.90])
MOUTH_INNER_COLOR = np.array([0.13, 0.04, 0.05])


@dataclass(frozen=True)
class SyntheticFaceSpec:
    """Appearance (colors, texture seed) + structure (expression, yaw, scale)."""

    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    texture_seed: int
    expression: float
    yaw: float
    scale: float
    identity_id: int = 0

    @property
    def appearance(self):
        return (self.skin, self.hair, self.texture_seed)

    @property
    def structure(self):
        return (self.expression, self.yaw, self.scale)

    def with_structure(self, expression=None, yaw=None, scale=None) -> "SyntheticFaceSpec":
        return SyntheticFaceSpec(
            skin=self.skin,
            hair=self.hair,
            texture_seed=self.texture_seed,
            expression=self.expression if expression is None else expression,
            yaw=self.yaw if yaw is None else yaw,
            scale=self.scale if scale is None else scale,
            identity_id=self.identity_id,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticFaceSpec":
        return cls(
            skin=tuple(d["skin"]),
            hair=tuple(d["hair"]),
            texture_seed=int(d["texture_seed"]),
            expression=float(d["expression"]),
            yaw=float(d["yaw"]),
            scale=float(d["scale"]),
            identity_id=int(d.get("identity_id", 0)),
        )


def _clamped_structure(spec: SyntheticFaceSpec):
    e = float(np.clip(spec.expression, -1.0, 1.0))
    yaw = float(np.clip(spec.yaw, -1.0, 1.0))
    scale = float(np.clip(spec.scale, 0.8, 1.2))
    return e, yaw, scale


def synth_landmarks(spec: SyntheticFaceSpec, size: tuple[int, int]) -> LandmarkSet:
    """Evaluate the documented landmark formula for `spec` at image `size`."""
    h, w = size
    e, yaw, scale = _clamped_structure(spec)
    cx, cy = w / 2.0, FACE_CY * h
    rx, ry = FACE_RX * w * scale, FACE_RY * h * scale

    def warp(u):
        return u + YAW_SHIFT * yaw * (1.0 - u * u)

    def place(u, v, warped=True):
        u = warp(np.asarray(u, dtype=np.float64)) if warped else np.asarray(u, dtype=np.float64)
        return np.stack([cx + rx * u, cy + ry * np.asarray(v, dtype=np.float64)], axis=-1)

    def ellipse(cu, cv, ru, rv, n, warped=True):
        th = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        return place(cu + ru * np.cos(th), cv + rv * np.sin(th), warped)

    groups: dict[str, tuple[int, int]] = {}
    pts: list[np.ndarray] = []

    def add(name, arr):
        start = sum(len(p) for p in pts)
        pts.append(arr)
        groups[name] = (start, start + len(arr))

    add("contour", ellipse(0.0, 0.0, 1.0, 1.0, 12, warped=False))
    brow_t = np.linspace(0.0, 1.0, 4)
    brow_v = BROW_V_BASE + BROW_V_GAIN * e - BROW_ARCH * np.sin(np.pi * brow_t)
    add("left_brow", place(-0.55 + 0.40 * brow_t, brow_v))
    add("right_brow", place(0.15 + 0.40 * brow_t, brow_v))
    add("left_eye", ellipse(-EYE_U, EYE_V, EYE_RU, EYE_RV, 6))
    add("right_eye", ellipse(EYE_U, EYE_V, EYE_RU, EYE_RV, 6))
    add("nose", place([0.0, -0.08, 0.0, 0.08], [-0.05, 0.22, 0.27, 0.22]))
    mw = MOUTH_HALF_W_BASE + MOUTH_HALF_W_GAIN * e
    mh = MOUTH_HALF_H_BASE + MOUTH_HALF_H_GAIN * e
    add("mouth_outer", ellipse(0.0, MOUTH_V, mw, mh, 8))
    add("mouth_inner", ellipse(0.0, MOUTH_V, 0.6 * mw, 0.5 * mh, 6))

    assert tuple(groups) == GROUP_NAMES
    return LandmarkSet(np.vstack(pts), groups, (h, w))


def mouth_vertical_spread(spec: SyntheticFaceSpec, size: tuple[int, int]) -> float:
    """Closed-form mouth-outer vertical spread in pixels: 2 * mh * ry."""
    h, _ = size
    e, _, scale = _clamped_structure(spec)
    return 2.0 * (MOUTH_HALF_H_BASE + MOUTH_HALF_H_GAIN * e) * FACE_RY * h * scale


def _ellipse_mask(xs, ys, cx, cy, a, b):
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0


def _stroke_mask(shape, poly, width):
    mask = np.zeros(shape, dtype=bool)
    h, w = shape
    for a, b in zip(poly[:-1], poly[1:]):
        x0 = max(int(np.floor(min(a[0], b[0]) - width)), 0)
        x1 = min(int(np.ceil(max(a[0], b[0]) + width)), w - 1)
        y0 = max(int(np.floor(min(a[1], b[1]) - width)), 0)
        y1 = min(int(np.ceil(max(a[1], b[1]) + width)), h - 1)
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
        mask[y0 : y1 + 1, x0 : x1 + 1] |= dist < width
    return mask


def synth_face(spec: SyntheticFaceSpec, size: tuple[int, int] = (64, 64)):
    """Render a face image plus its landmarks; pure function of (spec, size).

    Returns (image, landmarks) with image as (H, W, 3) float32 in [0, 1].
    Colors come from a fixed per-spec palette so that every render of one
    appearance occupies the same coarse color-histogram bins.
    """
    h, w = size
    if h < 32 or w < 32:
        raise ValueError("size must be at least 32x32")
    lms = synth_landmarks(spec, size)
    e, yaw, scale = _clamped_structure(spec)
    cx, cy = w / 2.0, FACE_CY * h
    rx, ry = FACE_RX * w * scale, FACE_RY * h * scale

    skin = np.clip(np.asarray(spec.skin, dtype=np.float64), 0.0, 1.0)
    hair = np.clip(np.asarray(spec.hair, dtype=np.float64), 0.0, 1.0)
    lips = np.clip(skin * 0.55 + np.array([0.30, 0.02, 0.05]), 0.0, 1.0)
    iris = np.clip(hair * 0.5, 0.0, 1.0)
    freckle = skin * 0.78
    shade = skin * 0.85

    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = BACKGROUND
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    img[_ellipse_mask(xs, ys, cx, cy - 0.10 * h * scale, 1.12 * rx, 1.05 * ry)] = hair
    img[_ellipse_mask(xs, ys, cx, cy, rx, ry)] = skin

    # 0.75 px floor keeps every feature covering >= 1 pixel center, so each
    # palette color is present in every render of the same appearance.
    tiny = 0.75
    rng = np.random.default_rng(spec.texture_seed)
    for _ in range(40):
        ang = rng.uniform(0, 2 * np.pi)
        rad = np.sqrt(rng.uniform(0, 1.0)) * 0.9
        fx, fy = cx + rx * rad * np.cos(ang), cy + ry * rad * np.sin(ang)
        img[_ellipse_mask(xs, ys, fx, fy, rng.uniform(tiny, 1.3), rng.uniform(tiny, 1.3))] = freckle

    stroke = max(1.0, 0.014 * min(h, w))
    img[_stroke_mask((h, w), lms.group_points("nose"), max(tiny, 0.8 * stroke))] = shade
    for name in ("left_brow", "right_brow"):
        img[_stroke_mask((h, w), lms.group_points(name), stroke)] = hair

    for sgn in (-1.0, 1.0):
        eu = sgn * EYE_U + YAW_SHIFT * yaw * (1.0 - EYE_U * EYE_U)
        ex, ey = cx + rx * eu, cy + ry * EYE_V
        img[_ellipse_mask(xs, ys, ex, ey, max(tiny, EYE_RU * rx), max(tiny, EYE_RV * ry))] = SCLERA
        img[_ellipse_mask(xs, ys, ex, ey, tiny, max(tiny, 0.9 * EYE_RV * ry))] = iris

    mu = YAW_SHIFT * yaw  # mouth center warp at u=0
    mcx, mcy = cx + rx * mu, cy + ry * MOUTH_V
    mw = (MOUTH_HALF_W_BASE + MOUTH_HALF_W_GAIN * e) * rx
    mh = (MOUTH_HALF_H_BASE + MOUTH_HALF_H_GAIN * e) * ry
    img[_ellipse_mask(xs, ys, mcx, mcy, mw, max(mh, tiny))] = lips
    img[_ellipse_mask(xs, ys, mcx, mcy, 0.6 * mw, max(0.5 * mh, tiny))] = MOUTH_INNER_COLOR

    return img.astype(np.float32), lms


def fit_structure(
    image: np.ndarray,
    reference: SyntheticFaceSpec,
    size: tuple[int, int],
    coarse: int = 7,
    refine: int = 5,
):
    """Recover structure fields from an image by template matching.

    Renders candidate faces with `reference`'s appearance over a coarse grid
    of (expression, yaw, scale), keeps the best L1 match, then refines around
    it. Returns (fitted_spec, residual) where residual is the mean absolute
    pixel error of the winning template.
    """
    target = np.asarray(image, dtype=np.float64)

    def residual(spec):
        cand, _ = synth_face(spec, size)
        return float(np.abs(cand.astype(np.float64) - target).mean())

    best = None
    for e in np.linspace(-1.0, 1.0, coarse):
        for yw in np.linspace(-1.0, 1.0, coarse):
            for sc in np.linspace(0.8, 1.2, 3):
                spec = reference.with_structure(expression=e, yaw=yw, scale=sc)
                r = residual(spec)
                if best is None or r < best[0]:
                    best = (r, spec)
    r0, s0 = best
    de, dy, ds = 2.0 / (coarse - 1), 2.0 / (coarse - 1), 0.2
    for e in np.linspace(s0.expression - de, s0.expression + de, refine):
        for yw in np.linspace(s0.yaw - dy, s0.yaw + dy, refine):
            for sc in np.linspace(s0.scale - ds, s0.scale + ds, 3):
                spec = s0.with_structure(expression=e, yaw=yw, scale=sc)
                r = residual(spec)
                if r < best[0]:
                    best = (r, spec)
    return best[1], best[0]
