"""Multi-scale smooth-L1 objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .disparity_head import DisparityPyramid, resize_disparity


def smooth_l1(x):
    """0.5 x**2 where |x| < 1, |x| - 0.5 elsewhere. Works on floats and tensors."""
    if isinstance(x, torch.Tensor):
        ax = x.abs()
        return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


@dataclass
class LossWeights:
    scales: tuple
    half: float = 1.0
    full: float = 1.0

    def __post_init__(self):
        self.scales = tuple(float(w) for w in self.scales)
        if any(w < 0 for w in self.scales) or self.half < 0 or self.full < 0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def default(cls, num_scales: int) -> "LossWeights":
        """1/3 on the coarsest regressed map, 2/3 on the next coarsest, 1 elsewhere."""
        w = [1.0] * num_scales
        if num_scales >= 1:
            w[-1] = 1.0 / 3.0
        if num_scales >= 2:
            w[-2] = 2.0 / 3.0
        return cls(tuple(w))

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(tuple(w * factor for w in self.scales),
                           self.half * factor, self.full * factor)


def valid_mask(disparity: torch.Tensor, d_max: int | None = None) -> torch.Tensor:
    mask = torch.isfinite(disparity) & (disparity >= 0)
    if d_max is not None:
        mask &= disparity < d_max
    return mask


def scale_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean smooth-L1 over valid pixels after resizing ``pred`` to the target grid."""
    n = mask.sum()
    if int(n) == 0:
        raise ValueError("empty valid mask")
    pred = resize_disparity(pred, tuple(target.shape[-2:]))
    diff = torch.where(mask, target - pred, torch.zeros_like(pred))
    return smooth_l1(diff).sum() / n


def loss_terms(pyramid: DisparityPyramid, target, mask) -> list:
    return [scale_loss(p, target, mask) for p in pyramid.maps]


def combine(terms: list, weights: LossWeights, num_scales: int):
    if len(weights.scales) != num_scales:
        raise ValueError(f"{len(weights.scales)} scale weights for {num_scales} scales")
    extra = len(terms) - num_scales
    if extra not in (0, 1, 2):
        raise ValueError(f"expected {num_scales}..{num_scales + 2} loss terms, got {len(terms)}")
    w = list(weights.scales) + [weights.half, weights.full][:extra]
    return sum(wi * t for wi, t in zip(w, terms))


def total_loss(pyramid: DisparityPyramid, target: torch.Tensor, mask: torch.Tensor,
               weights: LossWeights | None = None) -> torch.Tensor:
    """Weighted sum of per-map losses; the full-resolution term is dropped when
    only one refinement ran."""
    s = len(pyramid.regressed)
    weights = LossWeights.default(s) if weights is None else weights
    return combine(loss_terms(pyramid, target, mask), weights, s)
