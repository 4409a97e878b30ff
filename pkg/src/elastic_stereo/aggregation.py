"""Stacked adaptive aggregation: intra-scale deformable residual stacks (ISA)
followed by cross-scale fusion (CSA) over every (target, source) pair."""

from __future__ import annotations

import copy

import torch
import torch.nn.functional as F
from torch import nn

from .cost_volume import num_candidates
from .elastic_ops import DeformConv3x3, resample, upsample_bilinear


class ISA(nn.Module):
    """1x1 conv -> 3x3 deformable conv -> 1x1 conv, plus the input.

    The last conv starts at zero so a fresh module is the identity.
    """

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, hidden, 1)
        self.deform = DeformConv3x3(hidden, hidden)
        self.conv3 = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, x):
        y = F.relu(self.conv1(x))
        y = F.relu(self.deform(y))
        return x + self.conv3(y)


def isa(volume, module: ISA):
    return module(volume)


class DownPath(nn.Module):
    """``steps`` 3x3 stride-2 convolutions from ``c_src`` to ``c_dst`` channels."""

    def __init__(self, c_src: int, c_dst: int, steps: int):
        super().__init__()
        self.weights = nn.ParameterList()
        for i in range(steps):
            c_out = c_dst if i == steps - 1 else c_src
            w = torch.empty(c_out, c_src, 3, 3)
            nn.init.kaiming_normal_(w, nonlinearity="relu")
            self.weights.append(nn.Parameter(w * 0.5))
        self.factor = 2 ** steps

    def forward(self, x):
        return resample(x, self.factor, "strided_conv_down", list(self.weights))


class UpPath(nn.Module):
    """Bilinear up-sampling then a 1x1 convolution to the target channels."""

    def __init__(self, c_src: int, c_dst: int):
        super().__init__()
        w = torch.empty(c_dst, c_src, 1, 1)
        nn.init.kaiming_normal_(w, nonlinearity="linear")
        self.weight = nn.Parameter(w * 0.5)

    def forward(self, x, size):
        return F.conv2d(upsample_bilinear(x, size), self.weight)


def _pair_key(s: int, k: int) -> str:
    return f"{s}_{k}"


class AAModule(nn.Module):
    """One intra-scale pass per scale, then cross-scale fusion.

    Holds parameters for ``num_scales`` scales; a forward call with fewer
    volumes only touches the parameters of those scales.
    """

    def __init__(self, d_max: int, num_scales: int, hidden: int):
        super().__init__()
        self.num_scales = num_scales
        cands = [num_candidates(d_max, s + 1) for s in range(num_scales)]
        self.isa = nn.ModuleList(ISA(c, hidden) for c in cands)
        self.paths = nn.ModuleDict()
        for s in range(num_scales):
            for k in range(num_scales):
                if k < s:
                    self.paths[_pair_key(s, k)] = DownPath(cands[k], cands[s], s - k)
                elif k > s:
                    self.paths[_pair_key(s, k)] = UpPath(cands[k], cands[s])

    def fuse(self, s: int, k: int, x: torch.Tensor, size) -> torch.Tensor:
        """Source volume ``k`` mapped onto target scale ``s``."""
        if k == s:
            return x
        path = self.paths[_pair_key(s, k)]
        return path(x) if k < s else path(x, size)

    def csa(self, volumes: list) -> list:
        n = len(volumes)
        if n > self.num_scales:
            raise ValueError(f"module built for {self.num_scales} scales, got {n}")
        out = []
        for s in range(n):
            size = tuple(volumes[s].shape[-2:])
            total = None
            for k in range(n):
                y = self.fuse(s, k, volumes[k], size)
                if y.shape != volumes[s].shape:
                    raise ValueError(f"path {k}->{s} produced {tuple(y.shape)}, "
                                     f"expected {tuple(volumes[s].shape)}")
                total = y if total is None else total + y
            out.append(total)
        return out

    def forward(self, volumes: list) -> list:
        return self.csa([self.isa[s](v) for s, v in enumerate(volumes)])

    def truncated(self, num_scales: int) -> "AAModule":
        """Standalone copy holding only the parameters for ``num_scales``."""
        m = copy.deepcopy(self)
        m.num_scales = num_scales
        m.isa = nn.ModuleList(list(m.isa)[:num_scales])
        keep = {_pair_key(s, k) for s in range(num_scales) for k in range(num_scales)}
        m.paths = nn.ModuleDict({key: p for key, p in m.paths.items() if key in keep})
        return m


class AAStack(nn.Module):
    def __init__(self, d_max: int, num_scales: int, hidden: int, num_modules: int):
        super().__init__()
        self.blocks = nn.ModuleList(AAModule(d_max, num_scales, hidden)
                                    for _ in range(num_modules))

    @property
    def num_modules(self) -> int:
        return len(self.blocks)

    def forward(self, volumes: list) -> list:
        for m in self.blocks:
            volumes = m(volumes)
        return volumes

    def truncated(self, num_scales: int) -> "AAStack":
        out = AAStack.__new__(AAStack)
        nn.Module.__init__(out)
        out.blocks = nn.ModuleList(m.truncated(num_scales) for m in self.blocks)
        return out


def aggregate(volumes: list, stack: AAStack) -> list:
    return stack(volumes)
