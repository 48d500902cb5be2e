"""Data handling: annotations, density maps, augmentation, splits, synthesis."""

from .annotations import (CrowdSample, HeadAnnotations, IMAGE_MEAN, IMAGE_STD,
                          load_annotations, normalize_image, denormalize_image,
                          rasterize_polygons, save_annotations)
from .augment import (AugmentationConfig, cap_longest_side, crop_at,
                      horizontal_mirror, random_crop, scale_sample)
from .dataset import list_sidecars, load_dataset, read_index, write_index
from .density import (DensityMap, apply_roi_mask, content_hash,
                      downsample_density, downsample_mask,
                      generate_density_map, load_density_raw, pad_to_multiple,
                      save_density_raw)
from .splits import kfold_splits
from .synthetic import perspective_band_counts, synthesize_scene

__all__ = [
    "AugmentationConfig", "CrowdSample", "DensityMap", "HeadAnnotations",
    "IMAGE_MEAN", "IMAGE_STD", "apply_roi_mask", "cap_longest_side",
    "content_hash", "crop_at", "denormalize_image", "downsample_density",
    "downsample_mask", "generate_density_map", "horizontal_mirror",
    "kfold_splits", "list_sidecars", "load_annotations", "load_dataset",
    "load_density_raw", "normalize_image", "pad_to_multiple",
    "perspective_band_counts", "random_crop", "rasterize_polygons",
    "read_index", "save_annotations", "save_density_raw", "scale_sample",
    "synthesize_scene", "write_index",
]
