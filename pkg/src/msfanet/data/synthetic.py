"""Synthetic crowd scenes for dataset-free testing.

Scenes are rendered deterministically from a seed: a textured background plus
one soft dark blob per head annotation. The ``perspective`` profile mimics the
typical surveillance geometry: more and smaller heads in the top third of the
frame, fewer and larger near the bottom.

Placement rule (the counting oracle recomputes this): with n points, the
bottom band gets ``(15 * n) // 100``, the middle band ``(30 * n) // 100`` and
the top band the remainder, so the top third always holds at least as many
points as the bottom third.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .annotations import CrowdSample, HeadAnnotations, normalize_image

_PROFILES = ("uniform", "perspective")


def perspective_band_counts(count: int):
    """(top, mid, bottom) point allocation for the perspective profile."""
    n_bot = (15 * count) // 100
    n_mid = (30 * count) // 100
    n_top = count - n_mid - n_bot
    return n_top, n_mid, n_bot


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Low-frequency gray texture in [0, 1], plus fine grain."""
    gh, gw = max(2, h // 16), max(2, w // 16)
    coarse = rng.uniform(-1.0, 1.0, size=(gh, gw))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    up = (coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
          + coarse[np.ix_(y1, x0)] * fy * (1 - fx)
          + coarse[np.ix_(y0, x1)] * (1 - fy) * fx
          + coarse[np.ix_(y1, x1)] * fy * fx)
    grain = rng.uniform(-1.0, 1.0, size=(h, w))
    return np.clip(0.55 + 0.12 * up + 0.02 * grain, 0.0, 1.0)


def _splat(canvas: np.ndarray, cx: float, cy: float, radius: float, depth: float):
    """Subtract a soft disk (head silhouette) from the gray canvas in place."""
    h, w = canvas.shape
    r = int(np.ceil(radius * 1.5))
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys = np.arange(y0, y1, dtype=np.float64)
    xs = np.arange(x0, x1, dtype=np.float64)
    d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
    blob = depth * np.exp(-d2 / (2.0 * (radius / 1.6) ** 2))
    canvas[y0:y1, x0:x1] = np.clip(canvas[y0:y1, x0:x1] - blob, 0.0, 1.0)


def synthesize_scene(seed: int, count: int, size=(224, 224),
                     density_profile: str = "uniform") -> CrowdSample:
    """Render a deterministic synthetic crowd sample with ``count`` heads."""
    if count < 0:
        raise ContractError(f"count must be >= 0, got {count}")
    if density_profile not in _PROFILES:
        raise ContractError(
            f"density_profile must be one of {_PROFILES}, got '{density_profile}'")
    h, w = int(size[0]), int(size[1])
    rng = np.random.default_rng(seed)
    gray = _background(rng, h, w)

    if density_profile == "uniform":
        xs = rng.uniform(0.0, w, size=count)
        ys = rng.uniform(0.0, h, size=count)
        radii = rng.uniform(3.0, 7.0, size=count)
    else:
        n_top, n_mid, n_bot = perspective_band_counts(count)
        b1, b2 = h / 3.0, 2.0 * h / 3.0
        xs = rng.uniform(0.0, w, size=count)
        ys = np.concatenate([
            rng.uniform(0.0, b1, size=n_top),
            rng.uniform(b1, b2, size=n_mid),
            rng.uniform(b2, h, size=n_bot),
        ])
        radii = np.concatenate([
            rng.uniform(1.5, 3.5, size=n_top),
            rng.uniform(3.0, 6.0, size=n_mid),
            rng.uniform(6.0, 10.0, size=n_bot),
        ])
    depths = rng.uniform(0.30, 0.55, size=count)
    # rendered coordinates stay strictly inside the frame
    xs = np.clip(xs, 0.0, w - 1e-3)
    ys = np.clip(ys, 0.0, h - 1e-3)

    for cx, cy, r, d in zip(xs, ys, radii, depths):
        _splat(gray, cx, cy, r, d)

    tint = rng.uniform(-0.02, 0.02, size=3)
    rgb = np.clip(gray[:, :, None] + tint[None, None, :], 0.0, 1.0)
    rgb_u8 = np.round(rgb * 255.0).astype(np.uint8)

    points = np.stack([xs, ys], axis=1) if count else np.zeros((0, 2))
    return CrowdSample(
        image=normalize_image(rgb_u8),
        annotations=HeadAnnotations(points, image_width=w, image_height=h),
        sample_id=f"synth_{seed:08d}",
    )
