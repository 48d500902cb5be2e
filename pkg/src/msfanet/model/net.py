"""The full counting network.

Five VGG-style convolution blocks (max-pool after every block except the
last) form the trunk. Two aggregation paths enrich it:

* short aggregation: from block 2 on, the block input is projected by a
  bias-free strided 1x1 convolution and added to the pooled block output,
  fusing features of adjacent scales;
* skip aggregation: a window-attention stem extracts low-level global
  features at stride 2, and bias-free strided 1x1 adapters inject them into
  the outputs of blocks 3, 4 and 5 by element-wise addition.

A regressor head (three 3x3 conv+ReLU layers and one stride-2 transposed
convolution with a final ReLU) turns block-5 features into a non-negative
density map at 1/8 of the input resolution.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..data.density import DensityMap
from ..errors import ContractError, LoadError
from .config import DENSITY_STRIDE, ModelConfig
from .swin import TransformerStem


class VggBlock(nn.Module):
    """Stack of 3x3 conv + ReLU, then a 2x2 max-pool unless it is the last block."""

    def __init__(self, in_channels: int, out_channels: int, n_convs: int, pool: bool):
        super().__init__()
        convs = []
        c = in_channels
        for _ in range(n_convs):
            convs.append(nn.Conv2d(c, out_channels, kernel_size=3, padding=1))
            c = out_channels
        self.convs = nn.ModuleList(convs)
        self.pool = nn.MaxPool2d(2, 2) if pool else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.convs[0].in_channels:
            raise ContractError(
                f"block expects {self.convs[0].in_channels} input channels, "
                f"got {x.shape[1]}")
        for conv in self.convs:
            x = F.relu(conv(x))
        if self.pool is not None:
            x = self.pool(x)
        return x


class DensityHead(nn.Module):
    """Density regressor on block-5 features; upsamples stride 16 -> 8."""

    def __init__(self, in_channels: int, widths):
        super().__init__()
        layers = []
        c = in_channels
        for wdt in widths:
            layers += [nn.Conv2d(c, wdt, kernel_size=3, padding=1), nn.ReLU()]
            c = wdt
        self.convs = nn.Sequential(*layers)
        self.up = nn.ConvTranspose2d(c, 1, kernel_size=4, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.up(self.convs(x)))


class MsfaNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.scaled_block_channels
        ins = (3,) + chans[:4]
        self.blocks = nn.ModuleList([
            VggBlock(ins[i], chans[i], cfg.convs_per_block[i], pool=(i < 4))
            for i in range(5)
        ])
        if cfg.enable_shortagg:
            # block 5 has no pool, so its shortcut keeps stride 1
            self.shortcuts = nn.ModuleDict({
                str(i): nn.Conv2d(chans[i - 2], chans[i - 1], kernel_size=1,
                                  stride=2 if i < 5 else 1, bias=False)
                for i in range(2, 6)
            })
        else:
            self.shortcuts = None
        if cfg.enable_skipagg:
            narrow, wide = cfg.scaled_stem_channels
            self.stem = TransformerStem(3, narrow, wide, cfg.stem_window, cfg.stem_heads)
            self.skip_adapters = nn.ModuleDict({
                str(t): nn.Conv2d(wide, chans[t - 1], kernel_size=1,
                                  stride=4 if t == 3 else 8, bias=False)
                for t in cfg.skip_targets
            })
        else:
            self.stem = None
            self.skip_adapters = None
        self.head = DensityHead(chans[4], cfg.scaled_head_channels)

    def pad_input(self, x: torch.Tensor):
        """Pad bottom/right to the config's multiple; returns (padded, (H, W))."""
        h, w = x.shape[-2:]
        m = self.cfg.pad_multiple
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            # reflect padding needs pad < dim; fall back to replicate for
            # inputs smaller than the padded geometry
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        return x, (h, w)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        """Fused block-5 features of an already padded input."""
        stem_out = self.stem(x) if self.stem is not None else None
        y = x
        for i in range(1, 6):
            block_in = y
            y = self.blocks[i - 1](block_in)
            if self.shortcuts is not None and i >= 2:
                shortcut = self.shortcuts[str(i)](block_in)
                if shortcut.shape != y.shape:
                    raise ContractError(
                        f"block {i} shortcut shape {tuple(shortcut.shape)} does "
                        f"not match block output {tuple(y.shape)}")
                y = y + shortcut
            if self.skip_adapters is not None and str(i) in self.skip_adapters:
                adapted = self.skip_adapters[str(i)](stem_out)
                if adapted.shape != y.shape:
                    raise ContractError(
                        f"skip features {tuple(adapted.shape)} do not match "
                        f"block {i} output {tuple(y.shape)}")
                y = y + adapted
        return y

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) image batch -> (B, 1, ceil(H/8), ceil(W/8)) density."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        x, (h, w) = self.pad_input(x)
        density = self.head(self.forward_features(x))
        out_h = -(-h // DENSITY_STRIDE)
        out_w = -(-w // DENSITY_STRIDE)
        return density[:, :, :out_h, :out_w]


# ---------------------------------------------------------------------------
# initialization and pretrained-backbone IO


def backbone_parameter_names(model: MsfaNet):
    """The 13 trunk convolution layers' parameter names, in network order."""
    names = []
    for i, block in enumerate(model.blocks):
        for j in range(len(block.convs)):
            names.append(f"blocks.{i}.convs.{j}.weight")
            names.append(f"blocks.{i}.convs.{j}.bias")
    return names


def init_parameters(cfg: ModelConfig, pretrained=None, seed: int = 0) -> MsfaNet:
    """Build a model with the documented initialization.

    Convolution/linear kernels and attention position-bias tables draw from
    N(0, 0.01^2); biases start at 0; normalization layers start at identity.
    When ``pretrained`` names a weight file, the 13 trunk convolutions load
    from it instead. ``model.init_tags`` records the choice per parameter.
    Deterministic under ``seed``.
    """
    model = MsfaNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    norm_modules = {name for name, mod in model.named_modules()
                    if isinstance(mod, nn.LayerNorm)}
    tags = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            owner = name.rsplit(".", 1)[0]
            if owner in norm_modules:
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
                tags[name] = "identity"
            elif name.endswith(".bias"):
                p.zero_()
                tags[name] = "zero"
            else:
                p.normal_(0.0, 0.01, generator=gen)
                tags[name] = "gaussian0.01"
    if pretrained is not None:
        load_pretrained_backbone(model, pretrained, tags)
    model.init_tags = tags
    return model


def save_backbone(model: MsfaNet, path) -> None:
    """Write the trunk convolution weights as an .npz keyed by parameter name."""
    state = dict(model.named_parameters())
    arrays = {name: state[name].detach().cpu().numpy()
              for name in backbone_parameter_names(model)}
    np.savez(path, **arrays)


def load_pretrained_backbone(model: MsfaNet, path, tags=None) -> None:
    """Load trunk weights from an .npz file; mismatches raise LoadError."""
    try:
        archive = np.load(path)
    except (OSError, ValueError) as e:
        raise LoadError(f"cannot read pretrained backbone {path}: {e}") from e
    state = dict(model.named_parameters())
    problems = []
    staged = {}
    for name in backbone_parameter_names(model):
        if name not in archive:
            problems.append(f"missing layer: {name}")
            continue
        arr = archive[name]
        if tuple(arr.shape) != tuple(state[name].shape):
            problems.append(
                f"shape mismatch for {name}: file {tuple(arr.shape)} "
                f"vs model {tuple(state[name].shape)}")
            continue
        staged[name] = arr
    if problems:
        raise LoadError("pretrained backbone does not fit the model:\n  "
                        + "\n  ".join(problems))
    with torch.no_grad():
        for name, arr in staged.items():
            state[name].copy_(torch.from_numpy(arr))
            if tags is not None:
                tags[name] = "pretrained"


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def predict_density(model: MsfaNet, image: np.ndarray, roi=None) -> DensityMap:
    """Run one normalized (H, W, 3) image through the model.

    Returns the 1/8-scale density map; when an ROI mask (full resolution) is
    given, cells outside it are zeroed after max-pool downsampling the mask.
    """
    from ..data.density import apply_roi_mask, downsample_mask

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
            t = t.to(next(model.parameters()).dtype)
            out = model(t)[0, 0].cpu().numpy()
    finally:
        model.train(was_training)
    d = DensityMap(out, scale=DENSITY_STRIDE)
    if roi is not None:
        h, w = image.shape[:2]
        ph, pw = (-h) % DENSITY_STRIDE, (-w) % DENSITY_STRIDE
        padded = np.pad(np.asarray(roi, dtype=bool), ((0, ph), (0, pw)))
        d = apply_roi_mask(d, downsample_mask(padded, DENSITY_STRIDE))
    return d
