"""Soft-argmax disparity regression and hierarchical residual refinement.

Disparities are in pixels of the grid they live on, so resizing a map by a
factor also multiplies its values by that factor.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .arch_space import REFINE_DILATIONS, REFINE_INPUT_CHANNELS, refine_layer_channels
from .elastic_ops import upsample_bilinear


def regress(volume: torch.Tensor) -> torch.Tensor:
    """Expected candidate index under the softmax of ``volume`` [B, D, H, W]."""
    d = volume.shape[1]
    if d < 1:
        raise ValueError("need at least one disparity candidate")
    prob = F.softmax(volume, dim=1)
    cand = torch.arange(d, dtype=volume.dtype, device=volume.device).view(1, d, 1, 1)
    return (prob * cand).sum(dim=1)


def resize_disparity(disp: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize ``disp`` [B, h, w] to ``size`` and rescale its values."""
    if tuple(disp.shape[-2:]) == tuple(size):
        return disp
    ratio = size[1] / disp.shape[-1]
    return upsample_bilinear(disp.unsqueeze(1), size).squeeze(1) * ratio


def warp_horizontal(image: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` [B, C, H, W] at ``x - disp`` along each row.

    Linear interpolation, zero outside the frame. A zero disparity returns the
    image exactly.
    """
    b, c, h, w = image.shape
    xs = torch.arange(w, dtype=image.dtype, device=image.device).view(1, 1, w)
    src = xs - disp
    x0 = torch.floor(src)
    frac = (src - x0).unsqueeze(1)
    x0 = x0.long()
    out = 0
    for dx, wt in ((0, 1 - frac), (1, frac)):
        xi = x0 + dx
        valid = ((xi >= 0) & (xi < w)).unsqueeze(1).to(image.dtype)
        idx = xi.clamp(0, w - 1).unsqueeze(1).expand(b, c, h, w)
        out = out + torch.gather(image, 3, idx) * wt * valid
    return out


class RefinementModule(nn.Module):
    """Residual disparity refinement at one resolution.

    Input features: the up-sampled disparity, the left image, the right image
    warped by that disparity and their mean absolute photometric error. A small
    dilated conv stack predicts a residual; its last layer starts at zero.
    """

    def __init__(self, channels: int = 16):
        super().__init__()
        convs = []
        for (c_in, c_out), dil in zip(refine_layer_channels(channels), REFINE_DILATIONS):
            convs.append(nn.Conv2d(c_in, c_out, 3, padding=dil, dilation=dil))
        self.convs = nn.ModuleList(convs)
        nn.init.zeros_(self.convs[-1].weight)
        nn.init.zeros_(self.convs[-1].bias)

    def features(self, disp, left, right):
        warped = warp_horizontal(right, disp)
        error = (left - warped).abs().mean(dim=1, keepdim=True)
        x = torch.cat([disp.unsqueeze(1), left, warped, error], dim=1)
        assert x.shape[1] == REFINE_INPUT_CHANNELS
        return x, warped, error

    def forward(self, disp_low, left, right):
        size = tuple(left.shape[-2:])
        if right.shape != left.shape:
            raise ValueError("left/right resolution mismatch")
        disp = resize_disparity(disp_low, size)
        x, _, _ = self.features(disp, left, right)
        for conv in self.convs[:-1]:
            x = F.leaky_relu(conv(x), 0.2)
        residual = self.convs[-1](x).squeeze(1)
        return F.relu(disp + residual)


class Refiner(nn.Module):
    """Two refinement passes: 1/3 -> 1/2, then 1/2 -> full resolution."""

    def __init__(self, channels: int = 16, depth: int = 2):
        super().__init__()
        self.stages = nn.ModuleList(RefinementModule(channels) for _ in range(depth))

    def forward(self, disp_third, left, right, depth: int | None = None) -> list:
        depth = len(self.stages) if depth is None else depth
        if not 0 <= depth <= len(self.stages):
            raise ValueError(f"refine depth {depth} out of range")
        h, w = left.shape[-2:]
        if h % 6 or w % 6 or disp_third.shape[-2:] != (h // 3, w // 3):
            raise ValueError("disparity must be at 1/3 of an image size divisible by 6")
        half = (F.avg_pool2d(left, 2), F.avg_pool2d(right, 2))
        inputs = [half, (left, right)]
        out, disp = [], disp_third
        for r in range(depth):
            disp = self.stages[r](disp, *inputs[r])
            out.append(disp)
        return out

    def truncated(self, depth: int) -> "Refiner":
        m = copy.deepcopy(self)
        m.stages = nn.ModuleList(list(m.stages)[:depth])
        return m


def refine(disparity_third, left_image, right_image, refiner: Refiner, depth: int = 2):
    return refiner(disparity_third, left_image, right_image, depth)


@dataclass
class DisparityPyramid:
    """Network outputs: ``regressed[s]`` at 1/(3 * 2**s) and ``refined`` at 1/2
    then full resolution (one or two maps)."""

    regressed: list
    refined: list = field(default_factory=list)
    full_size: tuple = ()

    @property
    def maps(self) -> list:
        return list(self.regressed) + list(self.refined)

    def final(self) -> torch.Tensor:
        """Best available prediction resized to full resolution."""
        last = self.refined[-1] if self.refined else self.regressed[0]
        return resize_disparity(last, self.full_size)
