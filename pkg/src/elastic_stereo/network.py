"""The elastic stereo supernet (the shared parameter store) and the standalone
subnets materialised from it."""

from __future__ import annotations

import torch
from torch import nn

from .aggregation import AAStack
from .arch_space import ArchConfig, SearchSpace, check_input_hw, validate
from .cost_volume import correlate
from .disparity_head import DisparityPyramid, Refiner, regress
from .feature_extractor import ElasticFeatureExtractor


class ElasticStereoNet(nn.Module):
    """Largest network; every subnet reads its weights from here.

    ``forward(left, right, config)`` runs the subnet selected by ``config``
    through the elastic ops. Images are [B, 3, H, W] in [0, 1].
    """

    def __init__(self, space: SearchSpace | None = None):
        super().__init__()
        self.space = SearchSpace() if space is None else space
        sp = self.space
        self.features = ElasticFeatureExtractor(sp)
        self.aggregation = AAStack(sp.max_disparity, sp.max_scale, sp.isa_channels,
                                   sp.num_aa_modules)
        self.refiner = Refiner(sp.refine_channels, sp.max_refine)

    def forward(self, left, right, config: ArchConfig | None = None) -> DisparityPyramid:
        config = self.space.max_config() if config is None else config
        validate(config, self.space)
        fl, fr = self.features.forward_pair(left, right, config)
        return _head(fl, fr, left, right, self.space.max_disparity, self.aggregation,
                     self.refiner, config.refine_depth)

    def predict(self, left, right, config: ArchConfig | None = None) -> torch.Tensor:
        return self(left, right, config).final()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @torch.no_grad()
    def sort_channels(self) -> None:
        """Put every searchable layer's hidden channels in importance order."""
        for unit in self.features.units:
            for layer in unit:
                layer.sort_channels()

    @torch.no_grad()
    def extract(self, config: ArchConfig) -> "StaticStereoNet":
        """Standalone subnet for ``config`` with its own copy of the weights."""
        validate(config, self.space)
        sub = StaticStereoNet(
            self.features.materialize(config),
            self.aggregation.truncated(config.scale),
            self.refiner.truncated(config.refine_depth),
            self.space.max_disparity, config)
        for p in sub.parameters():
            p.requires_grad_(True)
        return sub


class StaticStereoNet(nn.Module):
    """A fixed subnet; its forward uses plain convolutions only."""

    def __init__(self, features, aggregation, refiner, max_disparity: int,
                 config: ArchConfig):
        super().__init__()
        self.features = features
        self.aggregation = aggregation
        self.refiner = refiner
        self.max_disparity = max_disparity
        self.config = config

    def forward(self, left, right, config: ArchConfig | None = None) -> DisparityPyramid:
        if left.shape != right.shape:
            raise ValueError("left/right shapes differ")
        fl, fr = self.features(left), self.features(right)
        return _head(fl, fr, left, right, self.max_disparity, self.aggregation,
                     self.refiner, len(self.refiner.stages))

    def predict(self, left, right, config=None) -> torch.Tensor:
        return self(left, right).final()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _head(fl, fr, left, right, d_max, aggregation, refiner, refine_depth):
    volumes = aggregation(correlate(fl, fr, d_max))
    regressed = [regress(v) for v in volumes]
    refined = refiner(regressed[0], left, right, refine_depth)
    return DisparityPyramid(regressed, refined, tuple(left.shape[-2:]))


def extract_subnet(store: ElasticStereoNet, config: ArchConfig) -> StaticStereoNet:
    return store.extract(config)


def check_stereo_batch(left, right, scale: int) -> None:
    if left.shape != right.shape:
        raise ValueError("left/right shapes differ")
    if left.dim() != 4 or left.shape[1] != 3:
        raise ValueError(f"expected [B, 3, H, W] images, got {tuple(left.shape)}")
    check_input_hw(tuple(left.shape[-2:]), scale)
