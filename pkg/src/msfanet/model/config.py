"""Architecture hyperparameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

from ..errors import ContractError

DENSITY_STRIDE = 8  # output density map is 1/8 the input resolution


@dataclass
class ModelConfig:
    block_channels: tuple = (64, 128, 256, 512, 512)
    convs_per_block: tuple = (2, 2, 3, 3, 3)
    skip_targets: tuple = (3, 4, 5)          # blocks receiving stem features
    stem_channels: tuple = (96, 128)
    stem_window: int = 7
    stem_heads: int = 3
    enable_shortagg: bool = True
    enable_skipagg: bool = True
    head_channels: tuple = (256, 128, 64)    # density regressor widths
    channel_multiplier: float = 1.0          # shrink factor for tiny test models

    def __post_init__(self):
        self.block_channels = tuple(self.block_channels)
        self.convs_per_block = tuple(self.convs_per_block)
        self.skip_targets = tuple(self.skip_targets)
        self.stem_channels = tuple(self.stem_channels)
        self.head_channels = tuple(self.head_channels)
        if len(self.block_channels) != 5 or len(self.convs_per_block) != 5:
            raise ContractError("block_channels and convs_per_block must both have 5 entries")
        if not set(self.skip_targets) <= {3, 4, 5}:
            raise ContractError(f"skip_targets must be within {{3,4,5}}, got {self.skip_targets}")
        if self.stem_window < 1:
            raise ContractError(f"stem_window must be >= 1, got {self.stem_window}")
        if self.channel_multiplier <= 0:
            raise ContractError("channel_multiplier must be > 0")
        if self.enable_skipagg and self.scaled(self.stem_channels[0]) % self.stem_heads:
            raise ContractError(
                f"stem width {self.scaled(self.stem_channels[0])} not divisible by "
                f"{self.stem_heads} heads")

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.channel_multiplier)))

    @property
    def scaled_block_channels(self) -> tuple:
        return tuple(self.scaled(c) for c in self.block_channels)

    @property
    def scaled_stem_channels(self) -> tuple:
        return tuple(self.scaled(c) for c in self.stem_channels)

    @property
    def scaled_head_channels(self) -> tuple:
        return tuple(self.scaled(c) for c in self.head_channels)

    @property
    def pad_multiple(self) -> int:
        """Inputs are reflect-padded to this multiple before the forward pass.

        Divisibility by 16 keeps the five-block stride arithmetic exact and
        divisibility by 2 * window keeps the stem's window partition exact,
        for every ablation variant alike (so toggling modules never changes
        the padded geometry).
        """
        return math.lcm(2 * DENSITY_STRIDE, 2 * self.stem_window)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("block_channels", "convs_per_block", "skip_targets",
                    "stem_channels", "head_channels"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
