"""Heatmap and feature-map exports."""

from __future__ import annotations

import json
import os

import matplotlib
import numpy as np
import torch
from PIL import Image

matplotlib.use("Agg")  # noqa: E402  (headless)
from matplotlib import colormaps

from .data.density import DensityMap
from .errors import ContractError, MsfaError
from .model.net import MsfaNet


def colorize(values: np.ndarray, cmap: str = "viridis"):
    """Min/max-normalize a 2D grid and map it to 8-bit RGB.

    Returns (rgb_u8, header) where the header records the normalization so
    the mapping is invertible up to quantization; a constant grid maps to the
    minimum color and is flagged.
    """
    v = np.asarray(values, dtype=np.float64)
    vmin, vmax = float(v.min()), float(v.max())
    degenerate = vmax == vmin
    norm = np.zeros_like(v) if degenerate else (v - vmin) / (vmax - vmin)
    rgba = colormaps[cmap](norm)
    rgb = np.round(rgba[..., :3] * 255.0).astype(np.uint8)
    header = {"min": vmin, "max": vmax, "degenerate": degenerate, "cmap": cmap}
    return rgb, header


def export_grid_heatmap(values: np.ndarray, path, cmap: str = "viridis") -> None:
    """Write an 8-bit color-mapped PNG plus a JSON sidecar of the normalization."""
    path = os.fspath(path)
    rgb, header = colorize(values, cmap)
    try:
        Image.fromarray(rgb).save(path)
        with open(path + ".json", "w") as f:
            json.dump(header, f, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise MsfaError(f"cannot export heatmap to {path}: {e}") from e


def export_heatmap(d: DensityMap, path, cmap: str = "viridis") -> None:
    """Color-mapped PNG export of a density map."""
    export_grid_heatmap(d.values, path, cmap=cmap)


def capture_features(model: MsfaNet, image: np.ndarray, layer: str) -> np.ndarray:
    """Forward-hook capture of a named submodule's output feature grid.

    ``layer`` is a module name from ``model.named_modules()`` (for example
    ``blocks.4`` or ``stem.block2``); returns a (C, H, W) array.
    """
    modules = dict(model.named_modules())
    if layer not in modules:
        close = [n for n in modules if layer in n][:5]
        raise ContractError(
            f"no module named '{layer}'" + (f"; similar: {close}" if close else ""))
    grabbed = {}

    def hook(_mod, _inp, out):
        grabbed["features"] = out.detach()

    handle = modules[layer].register_forward_hook(hook)
    try:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
            model(t.to(next(model.parameters()).dtype))
        model.train(was_training)
    finally:
        handle.remove()
    if "features" not in grabbed:
        raise MsfaError(f"module '{layer}' did not fire during the forward pass")
    return grabbed["features"][0].cpu().numpy()


def export_feature_maps(model: MsfaNet, image: np.ndarray, layer: str,
                        out_dir, max_channels: int = 16,
                        cmap: str = "viridis") -> list:
    """Export per-channel heatmaps of a named layer; returns written paths."""
    features = capture_features(model, image, layer)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    safe = layer.replace(".", "_")
    for c in range(min(max_channels, features.shape[0])):
        path = os.path.join(out_dir, f"{safe}_ch{c:03d}.png")
        export_grid_heatmap(features[c], path, cmap=cmap)
        paths.append(path)
    return paths
