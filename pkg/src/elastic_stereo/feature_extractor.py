"""Elastic feature pyramid.

A stride-3 stem brings the image to 1/3 resolution; unit ``u`` (0-based) then
produces level ``u + 1`` at 1/(3 * 2**u). Units after the first downsample by
2 in their first layer. Only the first ``scale`` units run, and each unit only
runs its first ``unit_depths[u]`` layers.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .arch_space import ArchConfig, SearchSpace, check_input_hw, validate
from .elastic_ops import Affine, ElasticInvertedResidual, shrink_width

# images in [0, 1] are centred before the stem
_MEAN, _STD = 0.5, 0.25


def _stem(image, weight, aff_w, aff_b):
    x = (image - _MEAN) / _STD
    x = F.conv2d(x, weight, stride=3)
    return F.relu(x * aff_w.view(1, -1, 1, 1) + aff_b.view(1, -1, 1, 1))


class ElasticFeatureExtractor(nn.Module):
    def __init__(self, space: SearchSpace):
        super().__init__()
        self.space = space
        self.stem = nn.Parameter(torch.empty(space.stem_channels, 3, 3, 3))
        nn.init.kaiming_normal_(self.stem, nonlinearity="relu")
        self.stem_bn = Affine(space.stem_channels)
        self.units = nn.ModuleList()
        for u in range(space.num_units):
            c_in, c_out = space.unit_channels(u)
            layers = nn.ModuleList()
            for i in range(space.max_depth):
                stride = 2 if (u > 0 and i == 0) else 1
                layers.append(ElasticInvertedResidual(
                    c_in if i == 0 else c_out, c_out, stride,
                    space.kernel_choices, space.width_choices))
            self.units.append(layers)

    def forward(self, image: torch.Tensor, config: ArchConfig | None = None) -> list:
        config = self.space.max_config() if config is None else config
        validate(config, self.space)
        check_input_hw(tuple(image.shape[-2:]), config.scale)
        x = _stem(image, self.stem, self.stem_bn.weight, self.stem_bn.bias)
        levels = []
        for u in range(config.scale):
            for i in range(config.unit_depths[u]):
                x = self.units[u][i](x, config.layer_kernels[u][i], config.layer_widths[u][i])
            levels.append(x)
        return levels

    def forward_pair(self, left, right, config: ArchConfig | None = None):
        if left.shape != right.shape:
            raise ValueError(f"left/right shapes differ: {tuple(left.shape)} vs {tuple(right.shape)}")
        return self(left, config), self(right, config)

    def materialize(self, config: ArchConfig) -> "StaticFeatureExtractor":
        validate(config, self.space)
        units = []
        for u in range(config.scale):
            units.append([shrink_width(self.units[u][i], config.layer_widths[u][i],
                                       config.layer_kernels[u][i], rank=False)
                          for i in range(config.unit_depths[u])])
        return StaticFeatureExtractor(self.stem.detach().clone(),
                                      self.stem_bn.weight.detach().clone(),
                                      self.stem_bn.bias.detach().clone(), units)


class StaticFeatureExtractor(nn.Module):
    def __init__(self, stem, stem_w, stem_b, units):
        super().__init__()
        self.stem = nn.Parameter(stem)
        self.stem_bn_weight = nn.Parameter(stem_w)
        self.stem_bn_bias = nn.Parameter(stem_b)
        self.units = nn.ModuleList(nn.ModuleList(layers) for layers in units)

    @property
    def num_scales(self) -> int:
        return len(self.units)

    def forward(self, image):
        check_input_hw(tuple(image.shape[-2:]), self.num_scales)
        x = _stem(image, self.stem, self.stem_bn_weight, self.stem_bn_bias)
        levels = []
        for layers in self.units:
            for layer in layers:
                x = layer(x)
            levels.append(x)
        return levels


def extract(image, config: ArchConfig, extractor: ElasticFeatureExtractor) -> list:
    """Feature pyramid of ``image`` for ``config`` read from shared weights."""
    return extractor(image, config)


def extract_pair(left, right, config: ArchConfig, extractor: ElasticFeatureExtractor):
    return extractor.forward_pair(left, right, config)
