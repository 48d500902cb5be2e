"""Windowed self-attention stem.

Two attention blocks restrict multi-head self-attention to non-overlapping
spatial windows; the second block shifts the partition by half a window
(cyclic roll, with cross-boundary attention masked) so information crosses
window borders. Blocks use pre-normalization, a learned relative position
bias per head, residual connections and a 2-layer MLP.
"""

from __future__ import annotations

import functools

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ContractError


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nWindows, window*window, C); partition must be exact."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ContractError(f"window {window} does not divide grid ({h}, {w})")
    x = x.view(b, h // window, window, w // window, window, c)
    x = x.permute(0, 1, 3, 2, 4, 5).contiguous()
    return x.view(-1, window * window, c)


def window_reverse(tokens: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    b = tokens.shape[0] // ((h // window) * (w // window))
    x = tokens.view(b, h // window, w // window, window, window, -1)
    x = x.permute(0, 1, 3, 2, 4, 5).contiguous()
    return x.view(b, h, w, -1)


@functools.lru_cache(maxsize=64)
def shift_mask(h: int, w: int, window: int, shift: int) -> torch.Tensor:
    """(nWindows, N, N) additive mask blocking attention across the roll seam.

    Cached per geometry; callers must not mutate the returned tensor.
    """
    region = torch.zeros(1, h, w, 1)
    h_slices = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    w_slices = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    tag = 0
    for hs in h_slices:
        for ws in w_slices:
            region[:, hs, ws, :] = tag
            tag += 1
    ids = window_partition(region, window).squeeze(-1)      # (nW, N)
    diff = ids.unsqueeze(1) - ids.unsqueeze(2)
    return torch.where(diff == 0, 0.0, float("-inf"))


class WindowAttention(nn.Module):
    """Multi-head softmax attention over token windows with position bias."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        if dim % heads:
            raise ContractError(f"heads ({heads}) must divide channel count ({dim})")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.position_bias = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, heads))
        coords = torch.stack(torch.meshgrid(
            torch.arange(window), torch.arange(window), indexing="ij"))
        flat = coords.flatten(1)                              # (2, N)
        rel = flat[:, :, None] - flat[:, None, :]             # (2, N, N)
        rel = rel.permute(1, 2, 0).contiguous()
        rel[:, :, 0] += window - 1
        rel[:, :, 1] += window - 1
        rel[:, :, 0] *= 2 * window - 1
        self.register_buffer("bias_index", rel.sum(-1), persistent=False)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor = None,
                return_attn: bool = False):
        """tokens: (B_, N, C) window batch; mask: (nW, N, N) additive or None."""
        b, n, c = tokens.shape
        qkv = self.qkv(tokens).reshape(b, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)        # (B_, heads, N, hd)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.position_bias[self.bias_index.view(-1)].view(n, n, self.heads)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b // nw, nw, self.heads, n, n) + mask[:, None]
            attn = attn.view(b, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out)
        if return_attn:
            return out, attn
        return out


class SwinBlock(nn.Module):
    """Pre-norm window attention + MLP block, optionally on a shifted partition."""

    def __init__(self, dim: int, heads: int, window: int, shifted: bool,
                 mlp_ratio: float = 4.0):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, C, H, W) with H, W divisible by the window size."""
        b, c, h, w = x.shape
        window = self.window
        # a single-window grid has no partition boundary to shift across
        shift = window // 2 if self.shifted and min(h, w) > window else 0
        tokens = x.permute(0, 2, 3, 1)                        # (B, H, W, C)

        y = self.norm1(tokens)
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
            mask = shift_mask(h, w, window, shift).to(x.device)
        else:
            mask = None
        windows = window_partition(y, window)
        windows = self.attn(windows, mask=mask)
        y = window_reverse(windows, window, h, w)
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        tokens = tokens + y
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens.permute(0, 3, 1, 2)


class TransformerStem(nn.Module):
    """Low-level global feature extractor feeding the skip aggregation path.

    1x1 conv (to the narrow stem width) -> 2x2 average pool, stride 2 ->
    window-attention block (regular partition) -> window-attention block
    (shifted partition) -> 1x1 conv (to the wide stem width) -> bilinear
    resize to exactly half the input resolution. Output stride is 2.
    """

    def __init__(self, in_channels: int, narrow: int, wide: int,
                 window: int, heads: int):
        super().__init__()
        self.window = window
        self.embed = nn.Conv2d(in_channels, narrow, kernel_size=1)
        self.pool = nn.AvgPool2d(kernel_size=2, stride=2)
        self.block1 = SwinBlock(narrow, heads, window, shifted=False)
        self.block2 = SwinBlock(narrow, heads, window, shifted=True)
        self.out_conv = nn.Conv2d(narrow, wide, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % (2 * self.window) or w % (2 * self.window):
            raise ContractError(
                f"stem input ({h}, {w}) must divide 2*window={2 * self.window}; "
                "pad the image first")
        y = self.pool(self.embed(x))
        y = self.block2(self.block1(y))
        y = self.out_conv(y)
        target = (h // 2, w // 2)
        if y.shape[-2:] != target:
            y = F.interpolate(y, size=target, mode="bilinear", align_corners=False)
        return y
