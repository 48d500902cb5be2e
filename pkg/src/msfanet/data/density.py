"""Ground-truth density maps: generation, downsampling, masking, raw IO.

A density map is a non-negative float grid whose sum is the person count.
Each head annotation is blurred with a fixed-spread Gaussian kernel that is
renormalized to sum to exactly one after truncation and after clipping at the
image border, so the count is conserved no matter where the head sits.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, LoadError
from .annotations import HeadAnnotations

DENSITY_DTYPE = np.dtype("<f4")  # raw export: little-endian float32, row-major


@dataclass
class DensityMap:
    values: np.ndarray          # (H, W) float32, persons per cell
    scale: int = 1              # downsampling factor relative to the source image

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ContractError(f"density map must be 2D, got shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def total(self) -> float:
        """Person count represented by the map (float64 accumulation)."""
        return float(np.sum(self.values, dtype=np.float64))


def generate_density_map(ann: HeadAnnotations, sigma: float,
                         truncate: float = 4.0) -> DensityMap:
    """Blur head annotations into a full-resolution density map.

    Each point contributes one Gaussian kernel of spread ``sigma`` truncated at
    radius ``truncate * sigma`` (circular) and renormalized to sum to 1 after
    clipping to the image, so the map total equals the point count.
    """
    if sigma <= 0:
        raise ContractError(f"sigma must be > 0, got {sigma}")
    h, w = ann.image_height, ann.image_width
    canvas = np.zeros((h, w), dtype=np.float64)
    radius = truncate * sigma
    r_cells = int(math.ceil(radius))
    for x, y in ann.points:
        cx, cy = float(x), float(y)
        x0 = max(0, int(math.floor(cx)) - r_cells)
        x1 = min(w, int(math.floor(cx)) + r_cells + 1)
        y0 = max(0, int(math.floor(cy)) - r_cells)
        y1 = min(h, int(math.floor(cy)) + r_cells + 1)
        ys = np.arange(y0, y1, dtype=np.float64)
        xs = np.arange(x0, x1, dtype=np.float64)
        d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
        kernel = np.exp(-d2 / (2.0 * sigma * sigma))
        kernel[d2 > radius * radius] = 0.0
        total = kernel.sum()
        if total <= 0.0:  # cannot happen for in-bounds points, guard anyway
            continue
        canvas[y0:y1, x0:x1] += kernel / total
    return DensityMap(canvas.astype(np.float32), scale=1)


def pad_to_multiple(d: DensityMap, multiple: int) -> DensityMap:
    """Zero-pad bottom/right so both dims divide ``multiple`` (count preserved)."""
    if multiple < 1:
        raise ContractError(f"multiple must be >= 1, got {multiple}")
    h, w = d.values.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return DensityMap(d.values.copy(), scale=d.scale)
    out = np.pad(d.values, ((0, ph), (0, pw)))
    return DensityMap(out, scale=d.scale)


def downsample_density(d: DensityMap, factor: int = 8) -> DensityMap:
    """Block-sum downsampling: each output cell sums a factor x factor block.

    Summation (not interpolation) keeps the map total equal to the count.
    """
    if d.scale != 1:
        raise ContractError(f"expected a full-resolution map (scale 1), got scale {d.scale}")
    h, w = d.values.shape
    if h % factor or w % factor:
        raise ContractError(
            f"map dims ({h}, {w}) not divisible by factor {factor}; pad_to_multiple first")
    v = d.values.astype(np.float64)
    out = v.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return DensityMap(out.astype(np.float32), scale=d.scale * factor)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a binary mask by ``factor`` (a cell is inside if any pixel is)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if h % factor or w % factor:
        raise ContractError(
            f"mask dims ({h}, {w}) not divisible by factor {factor}")
    return mask.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


def apply_roi_mask(d: DensityMap, roi: np.ndarray) -> DensityMap:
    """Zero every cell outside the region of interest; inside cells unchanged."""
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != d.values.shape:
        raise ContractError(
            f"roi shape {roi.shape} does not match map shape {d.values.shape}; "
            "downsample the mask to the map's scale first")
    return DensityMap(np.where(roi, d.values, np.float32(0.0)), scale=d.scale)


def save_density_raw(d: DensityMap, path) -> None:
    """Write raw little-endian float32 (row-major) plus a JSON sidecar header."""
    path = os.fspath(path)
    raw = np.ascontiguousarray(d.values, dtype=DENSITY_DTYPE).tobytes()
    header = {
        "height": d.height,
        "width": d.width,
        "scale": d.scale,
        "sum": d.total(),
    }
    with open(path, "wb") as f:
        f.write(raw)
    with open(path + ".json", "w") as f:
        json.dump(header, f, sort_keys=True)
        f.write("\n")


def load_density_raw(path) -> DensityMap:
    """Read a raw-float density export written by :func:`save_density_raw`."""
    path = os.fspath(path)
    header_path = path + ".json"
    try:
        with open(header_path) as f:
            header = json.load(f)
        with open(path, "rb") as f:
            raw = f.read()
    except (OSError, json.JSONDecodeError) as e:
        raise LoadError(f"cannot read density export {path}: {e}") from e
    for key in ("height", "width", "scale"):
        if key not in header:
            raise LoadError(f"density header {header_path} missing field '{key}'")
    h, w = int(header["height"]), int(header["width"])
    expected = h * w * DENSITY_DTYPE.itemsize
    if len(raw) != expected:
        raise LoadError(
            f"density file {path} has {len(raw)} bytes, expected {expected} "
            f"for a {h}x{w} map (truncated or corrupt)")
    values = np.frombuffer(raw, dtype=DENSITY_DTYPE).reshape(h, w)
    return DensityMap(values.copy(), scale=int(header["scale"]))


def content_hash(*parts) -> str:
    """Stable hash of byte/str/number parts; used for idempotent GT generation."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, bytes):
            h.update(p)
        else:
            h.update(repr(p).encode())
        h.update(b"\x00")
    return h.hexdigest()
