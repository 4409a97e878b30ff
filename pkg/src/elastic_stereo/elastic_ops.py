"""Shared-weight building blocks.

* elastic kernel: a stored 7x7 depthwise kernel from which 5x5 and 3x3 kernels
  are derived through per-layer transform matrices (7->5 then 5->3, chained);
* elastic width: channels of an inverted-residual block are ranked by the L1
  norm of the expansion weights and a prefix of them is kept;
* 3x3 deformable convolution with bilinear, zero-padded sampling;
* bilinear up-sampling and strided-convolution down-sampling.

Everything is plain ``torch`` so gradients come from autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def center_crop(kernel: torch.Tensor, k: int) -> torch.Tensor:
    size = kernel.shape[-1]
    start = (size - k) // 2
    return kernel[..., start:start + k, start:start + k]


def derive_kernel(full_kernel: torch.Tensor, transforms, k: int,
                  kernel_choices=(3, 5, 7)) -> torch.Tensor:
    """Kernel of size ``k`` derived from the largest stored kernel.

    ``transforms`` maps ``"{big}to{small}"`` to a ``small**2 x small**2``
    matrix shared by all channels. Each step crops the centre of the current
    kernel and applies the matrix to its flattened values.
    """
    sizes = sorted(kernel_choices, reverse=True)
    if k not in sizes:
        raise ValueError(f"unsupported kernel size {k}; choices are {sorted(sizes)}")
    if full_kernel.shape[-1] != sizes[0]:
        raise ValueError("stored kernel must have the largest kernel size")
    kernel = full_kernel
    for big, small in zip(sizes, sizes[1:]):
        if big == k:
            break
        crop = center_crop(kernel, small)
        lead = crop.shape[:-2]
        flat = crop.reshape(-1, small * small)
        kernel = (flat @ transforms[f"{big}to{small}"].t()).reshape(*lead, small, small)
    return kernel


@dataclass
class ChannelImportance:
    l1_norms: np.ndarray
    order: np.ndarray


def rank_channels(weight) -> ChannelImportance:
    """Rank output channels of ``weight`` by descending L1 norm.

    Ties keep ascending channel index.
    """
    w = weight.detach().cpu().numpy() if isinstance(weight, torch.Tensor) else np.asarray(weight)
    if w.ndim == 0 or w.shape[0] < 1:
        raise ValueError("weight needs at least one output channel")
    norms = np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)
    order = np.argsort(-norms, kind="stable")
    return ChannelImportance(norms, order)


class Affine(nn.Module):
    """Per-channel scale and shift. Stands in for normalisation; it keeps no
    batch statistics, so every subnet sees the same function of its input."""

    def __init__(self, channels: int, scale_init: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.full((channels,), float(scale_init)))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, channels: int | None = None):
        w, b = self.weight, self.bias
        if channels is not None:
            w, b = w[:channels], b[:channels]
        return x * w.view(1, -1, 1, 1) + b.view(1, -1, 1, 1)


class _DepthwiseConv(torch.autograd.Function):
    """Depthwise convolution with a faster CPU backward than the stock one.

    The weight gradient is a grouped correlation of the padded input with the
    output gradient (channels as groups, batch as the reduction axis).
    """

    @staticmethod
    def forward(ctx, x, weight, stride, padding):
        ctx.save_for_backward(x, weight)
        ctx.stride, ctx.padding = stride, padding
        return F.conv2d(x, weight, stride=stride, padding=padding, groups=weight.shape[0])

    @staticmethod
    def backward(ctx, grad_out):
        x, weight = ctx.saved_tensors
        s, p = ctx.stride, ctx.padding
        c, k = weight.shape[0], weight.shape[-1]
        grad_x = grad_w = None
        if ctx.needs_input_grad[0]:
            grad_x = torch.nn.grad.conv2d_input(x.shape, weight, grad_out, stride=s,
                                                padding=p, groups=c)
        if ctx.needs_input_grad[1]:
            b, _, h, w = x.shape
            xp = F.pad(x, (p, p, p, p)).transpose(0, 1).reshape(1, c * b, h + 2 * p, w + 2 * p)
            gw = F.conv2d(xp, grad_out.transpose(0, 1).contiguous(), dilation=s, groups=c)
            grad_w = gw[:, :, :k, :k].reshape(c, 1, k, k)
        return grad_x, grad_w, None, None


def depthwise_conv(x, weight, stride: int = 1, padding: int = 0):
    return _DepthwiseConv.apply(x, weight, stride, padding)


def inverted_residual(x, expand_w, a1_w, a1_b, dw_w, a2_w, a2_b, proj_w, a3_w, a3_b,
                      stride: int, residual: bool):
    """1x1 expand -> kxk depthwise -> 1x1 project, with per-channel affines."""
    k = dw_w.shape[-1]
    y = F.conv2d(x, expand_w)
    y = F.relu(y * a1_w.view(1, -1, 1, 1) + a1_b.view(1, -1, 1, 1))
    y = depthwise_conv(y, dw_w, stride, k // 2)
    y = F.relu(y * a2_w.view(1, -1, 1, 1) + a2_b.view(1, -1, 1, 1))
    y = F.conv2d(y, proj_w)
    y = y * a3_w.view(1, -1, 1, 1) + a3_b.view(1, -1, 1, 1)
    return x + y if residual else y


class ElasticInvertedResidual(nn.Module):
    """Inverted-residual layer with elastic kernel size and expansion ratio.

    Stores the largest variant. Channels are used as a prefix, so the store
    is expected to be kept in importance order (see :meth:`sort_channels`).
    """

    def __init__(self, c_in: int, c_out: int, stride: int,
                 kernel_choices=(3, 5, 7), width_choices=(2, 4, 6, 8)):
        super().__init__()
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.kernel_choices = tuple(sorted(kernel_choices))
        self.width_choices = tuple(sorted(width_choices))
        kmax = self.kernel_choices[-1]
        hidden = c_in * self.width_choices[-1]
        self.hidden = hidden
        self.residual = stride == 1 and c_in == c_out

        self.expand = nn.Parameter(torch.empty(hidden, c_in, 1, 1))
        self.bn1 = Affine(hidden)
        self.depthwise = nn.Parameter(torch.empty(hidden, 1, kmax, kmax))
        self.bn2 = Affine(hidden)
        self.project = nn.Parameter(torch.empty(c_out, hidden, 1, 1))
        # residual branches start near identity
        self.bn3 = Affine(c_out, scale_init=0.1 if self.residual else 1.0)
        sizes = sorted(self.kernel_choices, reverse=True)
        self.transforms = nn.ParameterDict({
            f"{big}to{small}": nn.Parameter(torch.eye(small * small))
            for big, small in zip(sizes, sizes[1:])
        })
        nn.init.kaiming_normal_(self.expand, mode="fan_out", nonlinearity="relu")
        nn.init.kaiming_normal_(self.depthwise, mode="fan_out", nonlinearity="relu")
        nn.init.kaiming_normal_(self.project, mode="fan_in", nonlinearity="linear")

    def hidden_channels(self, ratio: int) -> int:
        if ratio not in self.width_choices:
            raise ValueError(f"width ratio {ratio} not in {self.width_choices}")
        return self.c_in * ratio

    def kernel(self, k: int, channels: int | None = None) -> torch.Tensor:
        full = self.depthwise if channels is None else self.depthwise[:channels]
        return derive_kernel(full, self.transforms, k, self.kernel_choices)

    def forward(self, x, kernel: int | None = None, ratio: int | None = None):
        kernel = self.kernel_choices[-1] if kernel is None else kernel
        ratio = self.width_choices[-1] if ratio is None else ratio
        h = self.hidden_channels(ratio)
        return inverted_residual(
            x, self.expand[:h], self.bn1.weight[:h], self.bn1.bias[:h],
            self.kernel(kernel, h), self.bn2.weight[:h], self.bn2.bias[:h],
            self.project[:, :h], self.bn3.weight, self.bn3.bias,
            self.stride, self.residual)

    @torch.no_grad()
    def reorder_channels(self, order) -> None:
        """Permute hidden channels consistently across all producer/consumer
        tensors; the block function is unchanged."""
        idx = torch.as_tensor(np.asarray(order), dtype=torch.long)
        self.expand.copy_(self.expand[idx])
        self.depthwise.copy_(self.depthwise[idx])
        for aff in (self.bn1, self.bn2):
            aff.weight.copy_(aff.weight[idx])
            aff.bias.copy_(aff.bias[idx])
        self.project.copy_(self.project[:, idx])

    def sort_channels(self) -> ChannelImportance:
        importance = rank_channels(self.expand)
        self.reorder_channels(importance.order)
        return importance


class StaticInvertedResidual(nn.Module):
    """Fixed-shape inverted-residual layer, materialised from an elastic one."""

    def __init__(self, expand, a1, depthwise, a2, project, a3, stride, residual):
        super().__init__()
        self.expand = nn.Parameter(expand)
        self.bn1_weight, self.bn1_bias = nn.Parameter(a1[0]), nn.Parameter(a1[1])
        self.depthwise = nn.Parameter(depthwise)
        self.bn2_weight, self.bn2_bias = nn.Parameter(a2[0]), nn.Parameter(a2[1])
        self.project = nn.Parameter(project)
        self.bn3_weight, self.bn3_bias = nn.Parameter(a3[0]), nn.Parameter(a3[1])
        self.stride = stride
        self.residual = residual

    @property
    def hidden(self) -> int:
        return self.expand.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.depthwise.shape[-1]

    def forward(self, x):
        return inverted_residual(
            x, self.expand, self.bn1_weight, self.bn1_bias, self.depthwise,
            self.bn2_weight, self.bn2_bias, self.project, self.bn3_weight,
            self.bn3_bias, self.stride, self.residual)


@torch.no_grad()
def shrink_width(block: ElasticInvertedResidual, ratio: int, kernel: int | None = None,
                 rank: bool = True) -> StaticInvertedResidual:
    """Materialise ``block`` at expansion ``ratio`` (and kernel size ``kernel``).

    With ``rank=True`` the retained hidden channels are the most important ones
    by L1 norm of the expansion weights, in importance order. With
    ``rank=False`` the leading channels are kept, which is what the supernet
    forward uses once the store has been sorted.
    """
    h = block.hidden_channels(ratio)
    kernel = block.kernel_choices[-1] if kernel is None else kernel
    if rank:
        idx = torch.as_tensor(rank_channels(block.expand).order[:h].copy(), dtype=torch.long)
    else:
        idx = torch.arange(h)
    dw = derive_kernel(block.depthwise[idx], block.transforms, kernel, block.kernel_choices)
    return StaticInvertedResidual(
        block.expand[idx].clone(),
        (block.bn1.weight[idx].clone(), block.bn1.bias[idx].clone()),
        dw.clone(),
        (block.bn2.weight[idx].clone(), block.bn2.bias[idx].clone()),
        block.project[:, idx].clone(),
        (block.bn3.weight.clone(), block.bn3.bias.clone()),
        block.stride, block.residual)


# ---------------------------------------------------------------------------
# deformable convolution
# ---------------------------------------------------------------------------

def bilinear_gather(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` [B, C, H, W] at fractional positions ``py``, ``px``
    (each [B, *S]) with zero padding outside the map. Returns [B, C, *S]."""
    b, c, h, w = x.shape
    out_shape = py.shape[1:]
    py = py.reshape(b, -1)
    px = px.reshape(b, -1)
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy1 = py - y0
    wx1 = px - x0
    y0 = y0.long()
    x0 = x0.long()
    flat = x.reshape(b, c, h * w)
    out = 0
    for dy, wy in ((0, 1 - wy1), (1, wy1)):
        for dx, wx in ((0, 1 - wx1), (1, wx1)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            idx = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1))
            vals = torch.gather(flat, 2, idx.unsqueeze(1).expand(b, c, idx.shape[1]))
            weight = (wy * wx * valid.to(x.dtype)).unsqueeze(1)
            out = out + vals * weight
    return out.reshape(b, c, *out_shape)


def deformable_conv3x3(x: torch.Tensor, weight: torch.Tensor, offset: torch.Tensor,
                       bias: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 deformable convolution, stride 1, padding 1.

    ``offset`` is [B, 18, H, W]; channels ``2j`` and ``2j+1`` hold the (dy, dx)
    displacement of kernel tap ``j`` (row-major over the 3x3 window).
    """
    b, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("empty input")
    ky, kx = torch.meshgrid(torch.arange(3, dtype=x.dtype), torch.arange(3, dtype=x.dtype),
                            indexing="ij")
    ky = (ky.reshape(9) - 1).view(1, 9, 1, 1)
    kx = (kx.reshape(9) - 1).view(1, 9, 1, 1)
    gy = torch.arange(h, dtype=x.dtype).view(1, 1, h, 1)
    gx = torch.arange(w, dtype=x.dtype).view(1, 1, 1, w)
    off = offset.view(b, 9, 2, h, w)
    py = gy + ky + off[:, :, 0]
    px = gx + kx + off[:, :, 1]
    cols = bilinear_gather(x, py, px)  # [B, C, 9, H, W]
    out = torch.einsum("ocj,bcjhw->bohw", weight.reshape(weight.shape[0], c, 9), cols)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class DeformConv3x3(nn.Module):
    """Deformable 3x3 convolution whose offsets come from a plain 3x3 conv
    over the same input. The offset predictor starts at zero output."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, 3, 3))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.offset = nn.Conv2d(c_in, 18, 3, padding=1)
        nn.init.kaiming_normal_(self.weight, nonlinearity="relu")
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)

    def forward(self, x):
        return deformable_conv3x3(x, self.weight, self.offset(x), self.bias)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def upsample_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize with half-pixel centres (``align_corners=False``)."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def resample(x: torch.Tensor, factor: int, mode: str = "bilinear_up",
             weights=None) -> torch.Tensor:
    """Resize ``x`` by ``factor``.

    ``bilinear_up`` multiplies the spatial size by ``factor``;
    ``strided_conv_down`` divides it by ``factor = 2**m`` using the ``m``
    3x3 stride-2 convolution kernels in ``weights`` (ReLU between them).
    """
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    if mode == "bilinear_up":
        return upsample_bilinear(x, (h * factor, w * factor))
    if mode == "strided_conv_down":
        m = int(factor).bit_length() - 1
        if factor < 1 or 2 ** m != factor:
            raise ValueError(f"down-sampling factor must be a power of two, got {factor}")
        if weights is None or len(weights) != m:
            raise ValueError(f"need {m} conv kernels for factor {factor}")
        for i, wt in enumerate(weights):
            x = F.conv2d(x, wt, stride=2, padding=1)
            if i < m - 1:
                x = F.relu(x)
        return x
    raise ValueError(f"unknown resample mode {mode!r}")
