"""Annotation ingestion: head points, images, ROI polygons.

The canonical annotation container is a JSON sidecar next to the image:

    {"image": "scene_0001.png",
     "points": [[x, y], ...],
     "roi_polygons": [[[x, y], ...], ...]}   # optional

``roi_polygons`` are rasterized to a binary mask. Out-of-bounds points are
clamped to the image boundary and counted rather than rejected, since real
dataset labels contain such points.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from ..errors import LoadError, SchemaError

# Channel statistics the image grid is normalized with (ImageNet convention,
# matching the pretrained backbone this model family starts from).
IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class HeadAnnotations:
    points: np.ndarray          # (N, 2) float64, columns x, y in pixels
    image_width: int
    image_height: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = pts

    def count(self) -> int:
        return len(self.points)


@dataclass
class CrowdSample:
    image: np.ndarray                    # (H, W, 3) float32, normalized
    annotations: HeadAnnotations
    roi: Optional[np.ndarray] = None     # (H, W) bool, optional
    sample_id: str = ""
    clamped_points: int = 0              # warning tally from ingestion

    def __post_init__(self):
        if self.roi is not None and self.roi.shape != self.image.shape[:2]:
            raise SchemaError(
                f"roi shape {self.roi.shape} does not match image "
                f"spatial shape {self.image.shape[:2]}")


def normalize_image(rgb_u8: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 -> normalized float32 HxWx3."""
    img = rgb_u8.astype(np.float32) / 255.0
    return (img - IMAGE_MEAN) / IMAGE_STD


def denormalize_image(img: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_image`, back to uint8."""
    rgb = img * IMAGE_STD + IMAGE_MEAN
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def rasterize_polygons(polygons, height: int, width: int) -> np.ndarray:
    """Rasterize a list of [[x, y], ...] polygons to a bool mask."""
    mask = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(mask)
    for poly in polygons:
        pts = [(float(x), float(y)) for x, y in poly]
        if len(pts) >= 3:
            draw.polygon(pts, fill=1)
    return np.array(mask, dtype=bool)


def clamp_points(points: np.ndarray, width: int, height: int):
    """Clamp points into [0, w-1] x [0, h-1]; returns (points, n_clamped)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    clamped = np.empty_like(pts)
    clamped[:, 0] = np.clip(pts[:, 0], 0.0, width - 1.0)
    clamped[:, 1] = np.clip(pts[:, 1], 0.0, height - 1.0)
    n_clamped = int(np.any(clamped != pts, axis=1).sum())
    return clamped, n_clamped


def load_annotations(path) -> CrowdSample:
    """Load an annotation sidecar plus its image into a CrowdSample.

    Raises LoadError for missing/corrupt files and SchemaError (naming the
    offending field) for malformed documents.
    """
    path = os.fspath(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise LoadError(f"annotation file not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise LoadError(f"cannot parse annotation file {path}: {e}") from e

    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top-level document must be an object")
    if "image" not in doc or not isinstance(doc["image"], str):
        raise SchemaError(f"{path}: field 'image' must be a relative path string")
    if "points" not in doc or not isinstance(doc["points"], list):
        raise SchemaError(f"{path}: field 'points' must be a list of [x, y] pairs")
    for i, p in enumerate(doc["points"]):
        if (not isinstance(p, (list, tuple)) or len(p) != 2
                or not all(isinstance(v, (int, float)) for v in p)):
            raise SchemaError(f"{path}: field 'points[{i}]' must be an [x, y] number pair")

    image_path = os.path.join(os.path.dirname(path), doc["image"])
    try:
        with Image.open(image_path) as im:
            rgb = np.array(im.convert("RGB"))
    except FileNotFoundError as e:
        raise LoadError(f"image file not found: {image_path}") from e
    except OSError as e:
        raise LoadError(f"cannot decode image {image_path}: {e}") from e

    h, w = rgb.shape[:2]
    pts, n_clamped = clamp_points(np.array(doc["points"], dtype=np.float64).reshape(-1, 2), w, h)

    roi = None
    if "roi_polygons" in doc and doc["roi_polygons"] is not None:
        if not isinstance(doc["roi_polygons"], list):
            raise SchemaError(f"{path}: field 'roi_polygons' must be a list of polygons")
        roi = rasterize_polygons(doc["roi_polygons"], h, w)

    sample_id = os.path.splitext(os.path.basename(path))[0]
    return CrowdSample(
        image=normalize_image(rgb),
        annotations=HeadAnnotations(pts, image_width=w, image_height=h),
        roi=roi,
        sample_id=sample_id,
        clamped_points=n_clamped,
    )


def save_annotations(sample: CrowdSample, directory, sample_id: str = None) -> str:
    """Write a sample's image (PNG) and sidecar; returns the sidecar path."""
    sample_id = sample_id or sample.sample_id or "sample"
    os.makedirs(directory, exist_ok=True)
    image_name = f"{sample_id}.png"
    Image.fromarray(denormalize_image(sample.image)).save(
        os.path.join(directory, image_name))
    doc = {
        "image": image_name,
        "points": [[float(x), float(y)] for x, y in sample.annotations.points],
    }
    sidecar = os.path.join(directory, f"{sample_id}.json")
    with open(sidecar, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")
    return sidecar
