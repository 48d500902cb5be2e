"""Counting metrics, per-region error analysis, and method ranking.

MAE is the mean absolute count error; MSE (by the conventions of this task)
is the *root* of the mean squared count error. Region analysis splits maps
into three horizontal bands (top third "far", middle "mid", bottom "near"),
a deterministic proxy for distance from the camera.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data.density import DensityMap, apply_roi_mask, downsample_mask, \
    downsample_density, generate_density_map, pad_to_multiple
from .errors import ContractError
from .model.config import DENSITY_STRIDE
from .model.net import MsfaNet, predict_density

BANDS = ("far", "mid", "near")


def count_from_density(d: DensityMap) -> float:
    """Predicted person count: the integral (sum) of the density map."""
    return d.total()


def compute_mae_mse(pairs):
    """pairs: iterable of (gt_count, pred_count) -> (mae, mse).

    mae = (1/K) sum |gt - pred|; mse = sqrt((1/K) sum (gt - pred)^2).
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("compute_mae_mse needs at least one pair")
    diffs = np.array([float(g) - float(p) for g, p in pairs], dtype=np.float64)
    mae = float(np.mean(np.abs(diffs)))
    mse = float(math.sqrt(np.mean(diffs ** 2)))
    return mae, mse


def band_rows(height: int):
    """Row ranges of the far/mid/near bands; remainder rows join the nearest band."""
    if height < 3:
        raise ContractError(f"need at least 3 rows for region analysis, got {height}")
    b1 = round(height / 3)
    b2 = round(2 * height / 3)
    return {"far": (0, b1), "mid": (b1, b2), "near": (b2, height)}


def region_errors(pred: DensityMap, gt: DensityMap) -> dict:
    """Per-band (gt_count, pred_count, abs_error) for the three distance bands."""
    if pred.values.shape != gt.values.shape:
        raise ContractError(
            f"prediction shape {pred.values.shape} != ground truth {gt.values.shape}")
    out = {}
    for band, (r0, r1) in band_rows(pred.height).items():
        g = float(np.sum(gt.values[r0:r1], dtype=np.float64))
        p = float(np.sum(pred.values[r0:r1], dtype=np.float64))
        out[band] = {"gt_count": g, "pred_count": p, "abs_error": abs(g - p)}
    return out


def average_ranking(table: dict) -> dict:
    """Mean per-dataset rank over the datasets each method reports.

    ``table`` maps method -> {dataset: rank or None}; missing/None entries do
    not count toward that method's divisor.
    """
    out = {}
    for method, ranks in table.items():
        present = [r for r in ranks.values() if r is not None]
        if not present:
            raise ContractError(f"method '{method}' has no ranked dataset")
        out[method] = sum(present) / len(present)
    return out


def ranking_csv(table: dict, path, datasets=None) -> None:
    """Emit a ranking comparison table with the computed averages as CSV."""
    averages = average_ranking(table)
    if datasets is None:
        datasets = sorted({d for ranks in table.values() for d in ranks})
    with open(path, "w") as f:
        f.write("method," + ",".join(datasets) + ",avg_rank\n")
        for method in sorted(table, key=lambda m: averages[m]):
            cells = [("" if table[method].get(d) is None else str(table[method][d]))
                     for d in datasets]
            f.write(f"{method}," + ",".join(cells) + f",{averages[method]:.2f}\n")


@dataclass
class EvalReport:
    per_image: list                       # [{"id", "gt_count", "pred_count"}, ...]
    mae: float
    mse: float
    region_mae: Optional[dict] = None     # {"far": .., "mid": .., "near": ..}

    def to_dict(self) -> dict:
        d = {"per_image": self.per_image, "mae": self.mae, "mse": self.mse}
        if self.region_mae is not None:
            d["region_mae"] = self.region_mae
        return d

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as f:
            d = json.load(f)
        return cls(per_image=d["per_image"], mae=d["mae"], mse=d["mse"],
                   region_mae=d.get("region_mae"))


def ground_truth_eighth(sample, sigma: float) -> DensityMap:
    """1/8-scale ground-truth map of a sample (ROI-masked when present)."""
    gt = generate_density_map(sample.annotations, sigma)
    gt = downsample_density(pad_to_multiple(gt, DENSITY_STRIDE), DENSITY_STRIDE)
    if sample.roi is not None:
        h, w = sample.image.shape[:2]
        padded = np.pad(sample.roi, ((0, (-h) % DENSITY_STRIDE), (0, (-w) % DENSITY_STRIDE)))
        gt = apply_roi_mask(gt, downsample_mask(padded, DENSITY_STRIDE))
    return gt


def evaluate_model(model: MsfaNet, samples, sigma: float = 4.0,
                   regions: bool = False, workers: int = 1) -> EvalReport:
    """Whole-image inference over a sample list, aggregated into a report.

    Predictions (and ground truth) are ROI-masked for samples carrying a
    mask and counts stay real-valued. Per-image inference is independent, so
    ``workers > 1`` fans it out over threads (the model is shared read-only);
    the report is aggregated in sample order either way, so results do not
    depend on the worker count.
    """
    samples = list(samples)
    model.eval()  # no mode-dependent layers, but keeps threaded inference tidy
    per_image = []
    pairs = []
    band_errors = {band: [] for band in BANDS}

    def infer(sample):
        return (predict_density(model, sample.image, roi=sample.roi),
                ground_truth_eighth(sample, sigma))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(infer, samples))
    else:
        results = [infer(s) for s in samples]

    for sample, (pred, gt) in zip(samples, results):
        gt_count = gt.total() if sample.roi is not None else float(sample.annotations.count())
        pred_count = count_from_density(pred)
        per_image.append({"id": sample.sample_id,
                          "gt_count": gt_count, "pred_count": pred_count})
        pairs.append((gt_count, pred_count))
        if regions:
            for band, stats in region_errors(pred, gt).items():
                band_errors[band].append(stats["abs_error"])
    if not per_image:
        raise ContractError("evaluation needs at least one sample")
    mae, mse = compute_mae_mse(pairs)
    region_mae = None
    if regions:
        region_mae = {band: float(np.mean(v)) for band, v in band_errors.items()}
    return EvalReport(per_image=per_image, mae=mae, mse=mse, region_mae=region_mae)
