"""Synthetic stereo pairs with exact ground truth, PFM I/O and the EPE metric.

Geometry convention: a left pixel at column ``x`` with disparity ``d`` is seen
by the right camera at column ``x - d``. Equivalently the right image is the
left image sampled at ``x' + d_R(x')``, where ``d_R`` is the disparity field
expressed on the right image grid.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

GRID = 24  # 3 * 2**(S_max - 1)


@dataclass
class StereoSample:
    left: np.ndarray        # H x W x 3, float in [0, 1]
    right: np.ndarray       # H x W x 3
    disparity: np.ndarray   # H x W, left-view disparity in pixels
    valid: np.ndarray       # H x W bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.disparity.shape


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def sample_rows(image: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``image`` (H x W [x C]) along each row at the
    fractional columns ``xs`` (H x W). Zero outside the frame."""
    h, w = image.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    frac = xs - x0
    rows = np.arange(h)[:, None]
    out = 0.0
    for dx, wt in ((0, 1.0 - frac), (1, frac)):
        xi = x0 + dx
        ok = (xi >= 0) & (xi < w)
        vals = image[rows, np.clip(xi, 0, w - 1)]
        wt = np.where(ok, wt, 0.0)
        if image.ndim == 3:
            wt = wt[..., None]
        out = out + vals * wt
    return out


def random_texture(rng: np.random.Generator, h: int, w: int, sigma: float = 1.0) -> np.ndarray:
    noise = rng.standard_normal((h, w, 3))
    # shared luminance component plus weaker colour variation
    lum = noise[..., :1]
    noise = 0.8 * lum + 0.4 * noise
    tex = gaussian_filter(noise, sigma=(sigma, sigma, 0))
    tex = 0.5 + 0.5 * tex / (2.5 * tex.std())
    return np.clip(tex, 0.0, 1.0)


class DisparityField:
    """Smooth right-grid disparity: a tilted plane plus Gaussian bumps,
    clipped to [0, d_max - 1]. Horizontal slope stays below ``max_slope`` so
    the right-to-left column map is monotone."""

    def __init__(self, rng: np.random.Generator, h: int, w: int, d_max: int,
                 num_bumps: int = 5, max_slope: float = 0.6):
        self.d_max = d_max
        self.base = rng.uniform(0.15, 0.6) * (d_max - 1)
        self.gx = rng.uniform(-0.3, 0.3) * (d_max - 1) / w
        self.gy = rng.uniform(-0.3, 0.3) * (d_max - 1) / h
        n = int(num_bumps)
        self.cx = rng.uniform(0, w, n)
        self.cy = rng.uniform(0, h, n)
        self.sx = rng.uniform(6, 24, n)
        self.sy = rng.uniform(6, 24, n)
        self.amp = rng.uniform(-0.35, 0.35, n) * (d_max - 1)
        # peak |d/dx| of a bump is |A| / (s * sqrt(e))
        slope = abs(self.gx) + np.sum(np.abs(self.amp) / (self.sx * np.sqrt(np.e)))
        if slope > max_slope:
            scale = max(max_slope - abs(self.gx), 0.0) / (slope - abs(self.gx))
            self.amp = self.amp * scale

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        d = self.base + self.gx * x + self.gy * y
        for cx, cy, sx, sy, a in zip(self.cx, self.cy, self.sx, self.sy, self.amp):
            d = d + a * np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))
        return np.clip(d, 0.0, self.d_max - 1.0)


def left_disparity(field: Callable, h: int, w: int, iterations: int = 100) -> np.ndarray:
    """Solve ``d = field(x - d, y)`` for every left pixel by fixed-point iteration
    (a contraction while the field's horizontal slope is below 1)."""
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    d = field(x, y)
    for _ in range(iterations):
        d = field(x - d, y)
    return d


def generate_rds(seed, h: int, w: int, d_max: int, disparity=None,
                 num_bumps: int = 5, lr_threshold: float = 1.0,
                 min_valid: float = 0.5, max_tries: int = 20) -> StereoSample:
    """Random-texture stereo pair with exact disparity.

    ``disparity`` may force the field: a number gives a constant disparity, a
    callable ``f(x, y)`` gives an arbitrary right-grid field.
    """
    if h % GRID or w % GRID or h <= 0 or w <= 0:
        raise ValueError(f"image size {h}x{w} must be divisible by {GRID}")
    if d_max < 2:
        raise ValueError("d_max must be >= 2")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        if disparity is None:
            field = DisparityField(rng, h, w, d_max, num_bumps)
        elif callable(disparity):
            field = disparity
        else:
            value = float(disparity)
            field = lambda x, y, v=value: np.full(np.broadcast(x, y).shape, v)
        sample = _render(rng, field, h, w, d_max, lr_threshold)
        if disparity is not None or sample.valid.mean() >= min_valid:
            return sample
    raise RuntimeError("could not generate a sample with enough valid pixels")


def _render(rng, field, h, w, d_max, lr_threshold) -> StereoSample:
    left = random_texture(rng, h, w)
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    d_right = field(x, y)
    src = x + d_right
    right = sample_rows(left, src)
    off_frame = src > w - 1
    if off_frame.any():
        filler = random_texture(rng, h, w)
        right = np.where(off_frame[..., None], filler, right)

    d_left = left_disparity(field, h, w)
    xr = x - d_left
    in_frame = xr >= 0
    # left-right consistency against the right-grid disparity
    back = sample_rows(d_right, np.clip(xr, 0, w - 1))
    consistent = np.abs(back - d_left) <= lr_threshold
    valid = in_frame & consistent & np.isfinite(d_left) & (d_left >= 0) & (d_left < d_max)
    return StereoSample(left, right, d_left, valid)


def make_dataset(n: int, seed: int, h: int = 96, w: int = 144, d_max: int = 24) -> list:
    """``n`` samples from consecutive child seeds of ``seed``."""
    seeds = np.random.SeedSequence(seed).spawn(n)
    return [generate_rds(s, h, w, d_max) for s in seeds]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def epe(pred, target, valid=None) -> float:
    """Mean absolute disparity error over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    valid = np.isfinite(target) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("empty valid mask")
    return float(np.abs(pred[valid] - target[valid]).mean())


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

class PFMError(ValueError):
    pass


def write_pfm(path, data: np.ndarray, scale: float = -1.0) -> None:
    """Write a single-channel PFM. Negative ``scale`` means little-endian."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("only single-channel maps are supported")
    if scale == 0:
        raise ValueError("scale must be nonzero")
    h, w = data.shape
    dtype = "<f4" if scale < 0 else ">f4"
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{scale}\n".encode("ascii"))
        f.write(np.flipud(data).astype(dtype).tobytes())


def read_pfm(path) -> tuple[np.ndarray, float]:
    """Read a single-channel PFM; returns (top-to-bottom map, scale)."""
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            raise PFMError("unsupported: color PFM")
        if header != b"Pf":
            raise PFMError(f"malformed header {header[:16]!r}")
        dims = f.readline().decode("ascii", "replace")
        m = re.fullmatch(r"\s*(\d+)\s+(\d+)\s*", dims)
        if not m:
            raise PFMError(f"malformed dimensions line {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        try:
            scale = float(f.readline().decode("ascii").strip())
        except ValueError as exc:
            raise PFMError("malformed scale line") from exc
        if scale == 0:
            raise PFMError("scale must be nonzero")
        payload = f.read()
    need = 4 * w * h
    if len(payload) < need:
        raise PFMError(f"truncated payload: {len(payload)} of {need} bytes")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload[:need], dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32), scale


# ---------------------------------------------------------------------------
# dataset directories: {split}/{left,right,disp}/NNNN.{png,pfm}
# ---------------------------------------------------------------------------

def save_dataset(samples: list, root, split: str = "train") -> Path:
    from PIL import Image

    base = Path(root) / split
    for sub in ("left", "right", "disp"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        name = f"{i:04d}"
        for view, img in (("left", s.left), ("right", s.right)):
            arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(arr).save(base / view / f"{name}.png")
        disp = np.where(s.valid, s.disparity, np.inf)
        write_pfm(base / "disp" / f"{name}.pfm", disp)
    return base


def load_dataset(root, split: str = "train", d_max: int | None = None) -> list:
    from PIL import Image

    base = Path(root) / split
    if not (base / "left").is_dir():
        raise FileNotFoundError(f"no dataset split at {base}")
    samples = []
    for left_path in sorted((base / "left").glob("*.png")):
        name = left_path.stem
        left = np.asarray(Image.open(left_path).convert("RGB"), dtype=np.float64) / 255.0
        right = np.asarray(Image.open(base / "right" / f"{name}.png").convert("RGB"),
                           dtype=np.float64) / 255.0
        disp, _ = read_pfm(base / "disp" / f"{name}.pfm")
        disp = disp.astype(np.float64)
        valid = np.isfinite(disp) & (disp >= 0)
        if d_max is not None:
            valid &= disp < d_max
        samples.append(StereoSample(left, right, disp, valid))
    return samples


def to_tensors(samples: list, dtype=None):
    """Stack samples into (left, right, disparity, valid) torch tensors;
    images as [B, 3, H, W]."""
    import torch

    dtype = torch.get_default_dtype() if dtype is None else dtype
    left = torch.as_tensor(np.stack([s.left for s in samples]).transpose(0, 3, 1, 2).copy(),
                           dtype=dtype)
    right = torch.as_tensor(np.stack([s.right for s in samples]).transpose(0, 3, 1, 2).copy(),
                            dtype=dtype)
    disp = np.stack([np.where(s.valid, s.disparity, 0.0) for s in samples])
    valid = torch.as_tensor(np.stack([s.valid for s in samples]))
    return left, right, torch.as_tensor(disp, dtype=dtype), valid

