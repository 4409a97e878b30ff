"""Architecture search space: configuration type, validation, sampling, counting
and a shape-algebra cost model.

The cost model in :func:`estimate_cost` walks layer shapes directly; it does not
instantiate any network, so it can serve as an independent check on the
parameter count of an extracted subnet.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ELASTIC_DIMS = ("kernel", "depth", "width", "scale", "refine")


class InvalidConfigError(ValueError):
    """Raised when an :class:`ArchConfig` violates its search space.

    ``path`` locates the offending entry, e.g. ``("layer_kernels", 1, 2)``.
    """

    def __init__(self, message: str, path: tuple = ()):
        self.path = tuple(path)
        where = "/".join(str(p) for p in self.path)
        super().__init__(f"{where}: {message}" if where else message)


def _check_choice_set(name: str, values: Sequence[int]) -> tuple:
    values = tuple(int(v) for v in values)
    if not values:
        raise ValueError(f"{name} must be nonempty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{name} must be strictly increasing, got {values}")
    return values


@dataclass(frozen=True)
class SearchSpace:
    """Choice sets and fixed structural widths of the elastic network.

    ``base_channels`` / ``stem_channels`` and the aggregation/refinement widths
    are desk-scale defaults; only the choice sets come from the published
    setting (K in {3,5,7}, W in {2,4,6,8}, D in {2,3,4}, S in {2,3,4}).
    """

    num_units: int = 4
    kernel_choices: tuple = (3, 5, 7)
    width_choices: tuple = (2, 4, 6, 8)
    depth_choices: tuple = (2, 3, 4)
    scale_choices: tuple = (2, 3, 4)
    refine_choices: tuple = (1, 2)
    base_channels: tuple = (16, 24, 32, 48)
    stem_channels: int = 16
    max_disparity: int = 24
    isa_channels: int = 16
    num_aa_modules: int = 3
    refine_channels: int = 16

    def __post_init__(self):
        for name in ("kernel_choices", "width_choices", "depth_choices",
                     "scale_choices", "refine_choices"):
            object.__setattr__(self, name, _check_choice_set(name, getattr(self, name)))
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))
        if self.num_units < 1:
            raise ValueError("num_units must be >= 1")
        if len(self.base_channels) != self.num_units:
            raise ValueError("base_channels needs one entry per unit")
        if any(k % 2 == 0 for k in self.kernel_choices):
            raise ValueError("kernel sizes must be odd")
        if self.depth_choices[0] < 1 or self.scale_choices[0] < 1:
            raise ValueError("depth and scale choices must be >= 1")
        if self.scale_choices[-1] > self.num_units:
            raise ValueError("cannot use more scales than units")
        if not set(self.refine_choices) <= {1, 2}:
            raise ValueError("refine_choices must be a subset of {1, 2}")
        if self.max_disparity < 1:
            raise ValueError("max_disparity must be >= 1")

    @property
    def max_kernel(self) -> int:
        return self.kernel_choices[-1]

    @property
    def max_width(self) -> int:
        return self.width_choices[-1]

    @property
    def max_depth(self) -> int:
        return self.depth_choices[-1]

    @property
    def max_scale(self) -> int:
        return self.scale_choices[-1]

    @property
    def max_refine(self) -> int:
        return self.refine_choices[-1]

    def unit_channels(self, unit: int) -> tuple[int, int]:
        """(input channels, output channels) of ``unit``'s first layer."""
        c_in = self.stem_channels if unit == 0 else self.base_channels[unit - 1]
        return c_in, self.base_channels[unit]

    def disparity_candidates(self, scale: int) -> int:
        """Number of disparity candidates at 1-based ``scale``."""
        return -(-self.max_disparity // (3 * 2 ** (scale - 1)))

    def downsample_factor(self, scale: int) -> int:
        return 3 * 2 ** (scale - 1)

    def max_config(self) -> "ArchConfig":
        return ArchConfig.uniform(self, self.max_kernel, self.max_width,
                                  self.max_depth, self.max_scale, self.max_refine)

    def min_config(self) -> "ArchConfig":
        return ArchConfig.uniform(self, self.kernel_choices[0], self.width_choices[0],
                                  self.depth_choices[0], self.scale_choices[0],
                                  self.refine_choices[0])

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass(frozen=True)
class ArchConfig:
    """One point of the search space.

    ``layer_kernels[u]`` and ``layer_widths[u]`` list the kernel size and the
    width expansion ratio of each *active* layer of unit ``u``.
    """

    unit_depths: tuple
    layer_kernels: tuple
    layer_widths: tuple
    scale: int
    refine_depth: int = 2

    def __post_init__(self):
        object.__setattr__(self, "unit_depths", tuple(int(d) for d in self.unit_depths))
        object.__setattr__(self, "layer_kernels",
                           tuple(tuple(int(k) for k in ks) for ks in self.layer_kernels))
        object.__setattr__(self, "layer_widths",
                           tuple(tuple(int(w) for w in ws) for ws in self.layer_widths))
        object.__setattr__(self, "scale", int(self.scale))
        object.__setattr__(self, "refine_depth", int(self.refine_depth))

    @classmethod
    def uniform(cls, space: SearchSpace, kernel: int, width: int, depth: int,
                scale: int, refine_depth: int = 2) -> "ArchConfig":
        """Same kernel/width/depth in every unit, the (K, W, D, S) shorthand."""
        u = space.num_units
        return cls(unit_depths=(depth,) * u,
                   layer_kernels=((kernel,) * depth,) * u,
                   layer_widths=((width,) * depth,) * u,
                   scale=scale, refine_depth=refine_depth)

    def to_dict(self) -> dict:
        return {
            "unit_depths": list(self.unit_depths),
            "layer_kernels": [list(k) for k in self.layer_kernels],
            "layer_widths": [list(w) for w in self.layer_widths],
            "scale": self.scale,
            "refine_depth": self.refine_depth,
        }

    def to_json(self) -> str:
        """Canonical text form: sorted keys, no whitespace."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        required = {"unit_depths", "layer_kernels", "layer_widths", "scale", "refine_depth"}
        missing = required - set(d)
        if missing:
            raise InvalidConfigError(f"missing keys {sorted(missing)}")
        extra = set(d) - required
        if extra:
            raise InvalidConfigError(f"unknown keys {sorted(extra)}")
        try:
            return cls(d["unit_depths"], d["layer_kernels"], d["layer_widths"],
                       d["scale"], d["refine_depth"])
        except (TypeError, ValueError) as exc:
            raise InvalidConfigError(f"malformed config: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise InvalidConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def short_name(self) -> str:
        """Compact label such as ``K7W8D4S4R2`` when the config is uniform."""
        ks = {k for ks in self.layer_kernels for k in ks}
        ws = {w for ws in self.layer_widths for w in ws}
        ds = set(self.unit_depths)
        if len(ks) == len(ws) == len(ds) == 1:
            return f"K{ks.pop()}W{ws.pop()}D{ds.pop()}S{self.scale}R{self.refine_depth}"
        return f"mixed-S{self.scale}R{self.refine_depth}-{abs(hash(self)) % 10**8:08d}"


def validate(config: ArchConfig, space: SearchSpace) -> None:
    """Check ``config`` against ``space``; raise :class:`InvalidConfigError` on
    the first violated constraint."""
    if len(config.unit_depths) != space.num_units:
        raise InvalidConfigError(
            f"expected {space.num_units} unit depths, got {len(config.unit_depths)}",
            ("unit_depths",))
    for name in ("layer_kernels", "layer_widths"):
        if len(getattr(config, name)) != space.num_units:
            raise InvalidConfigError(f"expected {space.num_units} units", (name,))
    for u, depth in enumerate(config.unit_depths):
        if depth not in space.depth_choices:
            raise InvalidConfigError(
                f"depth not in {set(space.depth_choices)}: {depth}", ("unit_depths", u))
        for name, choices, what in (("layer_kernels", space.kernel_choices, "kernel"),
                                    ("layer_widths", space.width_choices, "width")):
            entries = getattr(config, name)[u]
            if len(entries) != depth:
                raise InvalidConfigError(
                    f"length mismatch: {len(entries)} {what} entries for depth {depth}",
                    (name, u))
            for i, v in enumerate(entries):
                if v not in choices:
                    raise InvalidConfigError(
                        f"{what} not in {set(choices)}: {v}", (name, u, i))
    if config.scale not in space.scale_choices:
        raise InvalidConfigError(f"scale not in {set(space.scale_choices)}: {config.scale}",
                                 ("scale",))
    if config.refine_depth not in space.refine_choices:
        raise InvalidConfigError(
            f"refine_depth not in {set(space.refine_choices)}: {config.refine_depth}",
            ("refine_depth",))


def is_valid(config: ArchConfig, space: SearchSpace) -> bool:
    try:
        validate(config, space)
    except InvalidConfigError:
        return False
    return True


def count_architectures(space: SearchSpace, full: bool = False) -> int:
    """Exact number of feature-extractor architectures.

    ``(sum_d (|K| * |W|) ** d) ** U``; with ``full=True`` the result is further
    multiplied by the number of scale and refinement choices.
    """
    per_layer = len(space.kernel_choices) * len(space.width_choices)
    per_unit = sum(per_layer ** d for d in space.depth_choices)
    total = per_unit ** space.num_units
    if full:
        total *= len(space.scale_choices) * len(space.refine_choices)
    return total


def enumerate_architectures(space: SearchSpace) -> Iterable[tuple]:
    """Brute-force enumeration of (depths, kernels, widths) triples.

    Only feasible for tiny spaces; exists as a cross-check for
    :func:`count_architectures`.
    """
    import itertools

    def unit_options():
        for d in space.depth_choices:
            for ks in itertools.product(space.kernel_choices, repeat=d):
                for ws in itertools.product(space.width_choices, repeat=d):
                    yield d, ks, ws

    options = list(unit_options())
    yield from itertools.product(options, repeat=space.num_units)


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_uniform(space: SearchSpace, seed=None,
                   dims: Iterable[str] = ELASTIC_DIMS) -> ArchConfig:
    """Draw a config with each unlocked dimension uniform over its choices.

    Dimensions not in ``dims`` are pinned to their maximum. ``seed`` may be an
    int or a ``numpy.random.Generator`` (which is advanced in place).
    """
    dims = set(dims)
    unknown = dims - set(ELASTIC_DIMS)
    if unknown:
        raise ValueError(f"unknown elastic dimensions {sorted(unknown)}")
    rng = _as_generator(seed)

    def pick(choices, unlocked):
        return int(choices[rng.integers(len(choices))]) if unlocked else int(choices[-1])

    depths, kernels, widths = [], [], []
    for _ in range(space.num_units):
        d = pick(space.depth_choices, "depth" in dims)
        depths.append(d)
        kernels.append([pick(space.kernel_choices, "kernel" in dims) for _ in range(d)])
        widths.append([pick(space.width_choices, "width" in dims) for _ in range(d)])
    scale = pick(space.scale_choices, "scale" in dims)
    refine = pick(space.refine_choices, "refine" in dims)
    return ArchConfig(depths, kernels, widths, scale, refine)


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------

@dataclass
class CostEstimate:
    params: int = 0
    macs: int = 0
    breakdown: dict = field(default_factory=dict)

    def add(self, part: str, params: int, macs: int) -> None:
        self.params += params
        self.macs += macs
        p, m = self.breakdown.get(part, (0, 0))
        self.breakdown[part] = (p + params, m + macs)


def conv_cost(c_in: int, c_out: int, kernel: int, out_hw: tuple[int, int],
              groups: int = 1, bias: bool = True) -> tuple[int, int]:
    """(params, MACs) of a 2-D convolution producing an ``out_hw`` map."""
    per_out = (c_in // groups) * kernel * kernel
    params = c_out * per_out + (c_out if bias else 0)
    macs = c_out * per_out * out_hw[0] * out_hw[1]
    return params, macs


def affine_cost(channels: int, hw: tuple[int, int]) -> tuple[int, int]:
    return 2 * channels, channels * hw[0] * hw[1]


def check_input_hw(input_hw: tuple[int, int], scale: int) -> None:
    factor = 3 * 2 ** (scale - 1)
    h, w = input_hw
    if h % factor or w % factor or h <= 0 or w <= 0:
        raise ValueError(f"input size {h}x{w} must be divisible by {factor} for S={scale}")


def estimate_cost(config: ArchConfig, space: SearchSpace,
                  input_hw: tuple[int, int]) -> CostEstimate:
    """Parameter and multiply-accumulate counts of the standalone subnet.

    MACs cover one stereo pair (both feature towers), correlation, aggregation,
    soft-argmax regression and refinement. Elementwise activations, pooling and
    additions are not counted; bilinear samples cost 4 MACs per value.
    """
    validate(config, space)
    check_input_hw(input_hw, config.scale)
    h, w = input_hw
    est = CostEstimate()

    # feature towers (parameters shared between views, MACs doubled)
    def feat(part, cost):
        est.add(part, cost[0], 2 * cost[1])

    hw = (h // 3, w // 3)
    feat("stem", conv_cost(3, space.stem_channels, 3, hw, bias=False))
    feat("stem", affine_cost(space.stem_channels, hw))
    for u in range(config.scale):
        c_in, c_out = space.unit_channels(u)
        for i in range(config.unit_depths[u]):
            stride = 2 if (u > 0 and i == 0) else 1
            cin = c_in if i == 0 else c_out
            hidden = cin * config.layer_widths[u][i]
            k = config.layer_kernels[u][i]
            out_hw = (hw[0] // stride, hw[1] // stride)
            part = f"unit{u + 1}"
            feat(part, conv_cost(cin, hidden, 1, hw, bias=False))
            feat(part, affine_cost(hidden, hw))
            feat(part, conv_cost(hidden, hidden, k, out_hw, groups=hidden, bias=False))
            feat(part, affine_cost(hidden, out_hw))
            feat(part, conv_cost(hidden, c_out, 1, out_hw, bias=False))
            feat(part, affine_cost(c_out, out_hw))
            hw = out_hw

    scale_hw = [(h // space.downsample_factor(s), w // space.downsample_factor(s))
                for s in range(1, config.scale + 1)]
    cands = [space.disparity_candidates(s) for s in range(1, config.scale + 1)]

    for s in range(config.scale):
        n_ch = space.base_channels[s]
        est.add("cost_volume", 0, cands[s] * n_ch * scale_hw[s][0] * scale_hw[s][1])

    hid = space.isa_channels
    for _ in range(space.num_aa_modules):
        for s in range(config.scale):
            c, shw = cands[s], scale_hw[s]
            for cost in (conv_cost(c, hid, 1, shw),
                         conv_cost(hid, 18, 3, shw),
                         conv_cost(hid, hid, 3, shw),
                         conv_cost(hid, c, 1, shw)):
                est.add("aggregation", *cost)
            est.add("aggregation", 0, 4 * 9 * hid * shw[0] * shw[1])
        for s in range(config.scale):
            for k in range(config.scale):
                if k < s:
                    for step in range(s - k):
                        c_out = cands[s] if step == s - k - 1 else cands[k]
                        est.add("aggregation",
                                *conv_cost(cands[k], c_out, 3, scale_hw[k + step + 1], bias=False))
                elif k > s:
                    shw = scale_hw[s]
                    est.add("aggregation", 0, 4 * cands[k] * shw[0] * shw[1])
                    est.add("aggregation", *conv_cost(cands[k], cands[s], 1, shw, bias=False))

    for s in range(config.scale):
        est.add("regression", 0, 2 * cands[s] * scale_hw[s][0] * scale_hw[s][1])

    rc = space.refine_channels
    for r in range(config.refine_depth):
        rhw = (h // 2, w // 2) if r == 0 else (h, w)
        # disparity upsampling, right-image warp, then the conv stack
        est.add("refinement", 0, 4 * rhw[0] * rhw[1] + 2 * 3 * rhw[0] * rhw[1])
        for c_in, c_out in refine_layer_channels(rc):
            est.add("refinement", *conv_cost(c_in, c_out, 3, rhw))
    return est


REFINE_INPUT_CHANNELS = 8  # disparity, left RGB, warped right RGB, photometric error
REFINE_DILATIONS = (1, 2, 4, 1, 1)


def refine_layer_channels(width: int) -> list[tuple[int, int]]:
    """(c_in, c_out) of each 3x3 conv of a refinement module."""
    return [(REFINE_INPUT_CHANNELS, width), (width, width), (width, width),
            (width, width), (width, 1)]


def macs_ratio_by_scale(space: SearchSpace, input_hw: tuple[int, int],
                        low: int, high: int) -> float:
    """MACs of the S=``low`` subnet over the S=``high`` one, all else maximal."""
    a = ArchConfig.uniform(space, space.max_kernel, space.max_width, space.max_depth,
                           low, space.max_refine)
    b = ArchConfig.uniform(space, space.max_kernel, space.max_width, space.max_depth,
                           high, space.max_refine)
    return estimate_cost(a, space, input_hw).macs / estimate_cost(b, space, input_hw).macs


def log10_count(space: SearchSpace) -> float:
    return math.log10(count_architectures(space))
