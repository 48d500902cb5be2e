"""Training-time augmentation: random crops, scale jitter, horizontal mirror.

Every operation is a pure function of its inputs plus an explicit RNG, so
augmentation is reproducible and safe to run from many workers. The RNG draw
order inside :func:`random_crop` is part of the contract (documented there);
the training loop's determinism and checkpoint-resume equivalence rely on it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ContractError
from .annotations import CrowdSample, HeadAnnotations


@dataclass
class AugmentationConfig:
    crop_size: int = 224                 # 512 for the large-image profile
    scales: tuple = (0.75, 1.0, 1.25)
    mirror: bool = True
    longest_side_cap: Optional[int] = None   # 2048 for the large-image profile
    rng_seed: int = 0

    def __post_init__(self):
        if self.crop_size <= 0:
            raise ContractError(f"crop_size must be > 0, got {self.crop_size}")
        if any(s <= 0 for s in self.scales):
            raise ContractError(f"every scale must be > 0, got {self.scales}")


def _resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) float image."""
    t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).contiguous().numpy()


def _resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    out = F.interpolate(t, size=(out_h, out_w), mode="nearest")
    return out[0, 0].numpy() > 0.5


def scale_sample(s: CrowdSample, factor: float) -> CrowdSample:
    """Resize image bilinearly by ``factor``; point coordinates scale with it."""
    if factor <= 0:
        raise ContractError(f"scale factor must be > 0, got {factor}")
    if factor == 1.0:
        return CrowdSample(s.image.copy(), HeadAnnotations(
            s.annotations.points.copy(), s.annotations.image_width, s.annotations.image_height),
            roi=None if s.roi is None else s.roi.copy(),
            sample_id=s.sample_id, clamped_points=s.clamped_points)
    h, w = s.image.shape[:2]
    out_h = max(1, int(round(h * factor)))
    out_w = max(1, int(round(w * factor)))
    image = _resize_image(s.image, out_h, out_w)
    points = s.annotations.points * factor
    roi = None if s.roi is None else _resize_mask(s.roi, out_h, out_w)
    return CrowdSample(image, HeadAnnotations(points, out_w, out_h), roi=roi,
                       sample_id=s.sample_id, clamped_points=s.clamped_points)


def cap_longest_side(s: CrowdSample, cap: int) -> CrowdSample:
    """Shrink so the longest image side is at most ``cap`` (aspect preserved)."""
    longest = max(s.image.shape[:2])
    if longest <= cap:
        return s
    return scale_sample(s, cap / longest)


def horizontal_mirror(s: CrowdSample) -> CrowdSample:
    """Reverse image columns; each point x -> width - 1 - x; roi mirrors too."""
    w = s.annotations.image_width
    image = np.ascontiguousarray(s.image[:, ::-1])
    points = s.annotations.points.copy()
    points[:, 0] = (w - 1.0) - points[:, 0]
    roi = None if s.roi is None else np.ascontiguousarray(s.roi[:, ::-1])
    return CrowdSample(image, HeadAnnotations(points, w, s.annotations.image_height),
                       roi=roi, sample_id=s.sample_id, clamped_points=s.clamped_points)


def random_crop(s: CrowdSample, cfg: AugmentationConfig,
                rng: Optional[np.random.Generator] = None) -> CrowdSample:
    """Crop a crop_size x crop_size patch at a random origin.

    Images smaller than the crop are upscaled to fit first. RNG draw order
    (the replayable contract): one integer for the crop top ``y0`` in
    [0, H - crop], then one for the left ``x0`` in [0, W - crop]. Points
    outside the crop window are dropped; the rest are translated.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    c = cfg.crop_size
    h, w = s.image.shape[:2]
    if min(h, w) < c:
        s = scale_sample(s, c / min(h, w))
        h, w = s.image.shape[:2]
        if min(h, w) < c:  # rounding guard
            s = scale_sample(s, (c + 1) / min(h, w))
            h, w = s.image.shape[:2]
    y0 = int(rng.integers(0, h - c + 1))
    x0 = int(rng.integers(0, w - c + 1))
    return crop_at(s, y0, x0, c)


def crop_at(s: CrowdSample, y0: int, x0: int, size: int) -> CrowdSample:
    """Deterministic crop used by random_crop and by its replay oracle."""
    h, w = s.image.shape[:2]
    if y0 < 0 or x0 < 0 or y0 + size > h or x0 + size > w:
        raise ContractError(f"crop ({y0},{x0},{size}) outside image ({h},{w})")
    image = np.ascontiguousarray(s.image[y0:y0 + size, x0:x0 + size])
    pts = s.annotations.points
    keep = ((pts[:, 0] >= x0) & (pts[:, 0] < x0 + size)
            & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + size))
    points = pts[keep] - np.array([x0, y0], dtype=np.float64)
    roi = None if s.roi is None else np.ascontiguousarray(s.roi[y0:y0 + size, x0:x0 + size])
    return CrowdSample(image, HeadAnnotations(points, size, size), roi=roi,
                       sample_id=s.sample_id, clamped_points=s.clamped_points)
