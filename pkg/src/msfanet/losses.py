"""Counting losses: global Euclidean term, locality-aware windowed term.

The windowed term divides each window's squared error by that window's
ground-truth count plus one, so sparse and crowded regions contribute on a
comparable footing; the +1 keeps empty windows finite. Window losses are
summed per sample ("gathered" over the window grid) and averaged over the
batch. The training objective is ``alpha * euclidean + pooling``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .errors import ContractError


@dataclass
class LossConfig:
    alpha: float = 0.1
    window: int = 4
    stride: int = 4   # stride == window -> non-overlapping windows

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.window < 1 or self.stride < 1:
            raise ContractError("window and stride must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    """Accept (K, H, W) or (K, 1, H, W); return (K, 1, H, W)."""
    if x.ndim == 3:
        return x.unsqueeze(1)
    if x.ndim == 4 and x.shape[1] == 1:
        return x
    raise ContractError(f"expected (K, H, W) or (K, 1, H, W), got {tuple(x.shape)}")


def _check_shapes(pred: torch.Tensor, gt: torch.Tensor):
    if pred.shape != gt.shape:
        raise ContractError(
            f"prediction shape {tuple(pred.shape)} != ground truth {tuple(gt.shape)}")
    if pred.shape[0] < 1:
        raise ContractError("batch must hold at least one sample")


def euclidean_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-sample sum of squared cell differences, averaged over the batch."""
    pred, gt = _as_batch(pred), _as_batch(gt)
    _check_shapes(pred, gt)
    per_sample = ((pred - gt) ** 2).flatten(1).sum(dim=1)
    return per_sample.mean()


def la_loss_window(pred_win: torch.Tensor, gt_win: torch.Tensor) -> torch.Tensor:
    """Squared error of one window over its ground-truth count plus one."""
    if pred_win.shape != gt_win.shape:
        raise ContractError(
            f"window shapes differ: {tuple(pred_win.shape)} vs {tuple(gt_win.shape)}")
    return ((pred_win - gt_win) ** 2).sum() / (gt_win.sum() + 1.0)


def _cover_pad(x: torch.Tensor, window: int, stride: int) -> torch.Tensor:
    """Zero-pad bottom/right so sliding windows tile the whole map."""
    h, w = x.shape[-2:]
    nh = max(1, -(-(max(h - window, 0)) // stride) + 1)
    nw = max(1, -(-(max(w - window, 0)) // stride) + 1)
    ph = window + (nh - 1) * stride - h
    pw = window + (nw - 1) * stride - w
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x


def pooling_loss(pred: torch.Tensor, gt: torch.Tensor,
                 cfg: LossConfig = None) -> torch.Tensor:
    """Sum of per-window losses over the window grid, averaged over the batch.

    When the window grid does not tile the maps exactly, prediction and
    ground truth are zero-padded identically (padding adds no count, so the
    denominators stay honest).
    """
    cfg = cfg or LossConfig()
    pred, gt = _as_batch(pred), _as_batch(gt)
    _check_shapes(pred, gt)
    win, stride = cfg.window, cfg.stride
    pred = _cover_pad(pred, win, stride)
    gt = _cover_pad(gt, win, stride)
    sq = F.unfold((pred - gt) ** 2, kernel_size=win, stride=stride).sum(dim=1)
    counts = F.unfold(gt, kernel_size=win, stride=stride).sum(dim=1)
    per_sample = (sq / (counts + 1.0)).sum(dim=1)
    return per_sample.mean()


def total_loss(pred: torch.Tensor, gt: torch.Tensor,
               cfg: LossConfig = None) -> torch.Tensor:
    """Training objective: alpha-weighted Euclidean term plus pooling term."""
    cfg = cfg or LossConfig()
    return cfg.alpha * euclidean_loss(pred, gt) + pooling_loss(pred, gt, cfg)
