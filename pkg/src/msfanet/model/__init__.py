"""Counting network: trunk blocks, aggregation paths, attention stem, head."""

from .config import DENSITY_STRIDE, ModelConfig
from .net import (DensityHead, MsfaNet, VggBlock, backbone_parameter_names,
                  init_parameters, load_pretrained_backbone, parameter_count,
                  predict_density, save_backbone)
from .swin import (SwinBlock, TransformerStem, WindowAttention, shift_mask,
                   window_partition, window_reverse)

__all__ = [
    "DENSITY_STRIDE", "DensityHead", "ModelConfig", "MsfaNet", "SwinBlock",
    "TransformerStem", "VggBlock", "WindowAttention",
    "backbone_parameter_names", "init_parameters", "load_pretrained_backbone",
    "parameter_count", "predict_density", "save_backbone", "shift_mask",
    "window_partition", "window_reverse",
]
