"""Per-scale correlation cost volumes."""

from __future__ import annotations

import torch
import torch.nn.functional as F


def num_candidates(d_max: int, scale: int) -> int:
    """Disparity candidates at 1-based ``scale``: ceil(d_max / (3 * 2**(scale-1)))."""
    return -(-d_max // (3 * 2 ** (scale - 1)))


def correlation(left: torch.Tensor, right: torch.Tensor, candidates: int) -> torch.Tensor:
    """``C[b, d, h, w] = <left[b, :, h, w], right[b, :, h, w - d]> / N``.

    Shifts that fall off the left edge give zero cost.
    """
    if left.shape != right.shape:
        raise ValueError("feature maps must have identical shapes")
    b, n, h, w = left.shape
    slices = []
    for d in range(candidates):
        if d == 0:
            slices.append((left * right).mean(dim=1))
        elif d < w:
            c = (left[..., d:] * right[..., :w - d]).mean(dim=1)
            slices.append(F.pad(c, (d, 0)))
        else:
            slices.append(left.new_zeros(b, h, w))
    return torch.stack(slices, dim=1)


def correlate(left: list, right: list, d_max: int) -> list:
    """Cost volume pyramid from two feature pyramids of the same config."""
    if len(left) != len(right):
        raise ValueError(f"pyramid scale mismatch: {len(left)} vs {len(right)}")
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    return [correlation(fl, fr, num_candidates(d_max, s + 1))
            for s, (fl, fr) in enumerate(zip(left, right))]
