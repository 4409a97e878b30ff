import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elastic_stereo.arch_space import (
    ELASTIC_DIMS, ArchConfig, InvalidConfigError, SearchSpace, conv_cost,
    count_architectures, enumerate_architectures, estimate_cost, is_valid,
    log10_count, sample_uniform, validate,
)

SPACE = SearchSpace()
HW = (96, 144)

# frozen from exact integer arithmetic: 12**2 + 12**3 + 12**4, then ** 4
PER_UNIT = 22608
FULL_COUNT = 261245355410128896


def test_default_space_choice_sets():
    assert SPACE.kernel_choices == (3, 5, 7)
    assert SPACE.width_choices == (2, 4, 6, 8)
    assert SPACE.depth_choices == (2, 3, 4)
    assert SPACE.scale_choices == (2, 3, 4)
    assert len(SPACE.kernel_choices) * len(SPACE.width_choices) == 12


def test_space_rejects_unsorted_or_empty_choices():
    with pytest.raises(ValueError):
        SearchSpace(kernel_choices=(5, 3))
    with pytest.raises(ValueError):
        SearchSpace(depth_choices=())


def test_max_config_is_valid():
    cfg = SPACE.max_config()
    validate(cfg, SPACE)
    assert cfg.unit_depths == (4, 4, 4, 4)
    assert cfg.scale == 4 and cfg.refine_depth == 2
    assert all(k == 7 for ks in cfg.layer_kernels for k in ks)


def test_depth_outside_choices_reports_path():
    d = SPACE.max_config().to_dict()
    d["unit_depths"][2] = 5
    d["layer_kernels"][2] = [7] * 5
    d["layer_widths"][2] = [8] * 5
    with pytest.raises(InvalidConfigError, match=r"depth not in \{2, 3, 4\}") as exc:
        validate(ArchConfig.from_dict(d), SPACE)
    assert exc.value.path == ("unit_depths", 2)


def test_length_mismatch():
    d = SPACE.max_config().to_dict()
    d["unit_depths"][0] = 2
    d["layer_kernels"][0] = [7, 7, 7]
    d["layer_widths"][0] = [8, 8]
    with pytest.raises(InvalidConfigError, match="length mismatch") as exc:
        validate(ArchConfig.from_dict(d), SPACE)
    assert exc.value.path == ("layer_kernels", 0)


@pytest.mark.parametrize("key,value", [("scale", 5), ("refine_depth", 3)])
def test_scalar_fields_checked(key, value):
    d = SPACE.max_config().to_dict()
    d[key] = value
    assert not is_valid(ArchConfig.from_dict(d), SPACE)


def test_kernel_outside_choices_path():
    d = SPACE.max_config().to_dict()
    d["layer_kernels"][1][3] = 9
    with pytest.raises(InvalidConfigError) as exc:
        validate(ArchConfig.from_dict(d), SPACE)
    assert exc.value.path == ("layer_kernels", 1, 3)


def test_count_matches_closed_form():
    assert 12 ** 2 + 12 ** 3 + 12 ** 4 == PER_UNIT
    assert count_architectures(SPACE) == FULL_COUNT
    assert count_architectures(SPACE) == PER_UNIT ** 4
    assert count_architectures(SPACE, full=True) == FULL_COUNT * 3 * 2
    assert 17 < log10_count(SPACE) < 18


def test_count_singleton_space():
    sp = SearchSpace(num_units=1, kernel_choices=(3,), width_choices=(2,), depth_choices=(1,),
                     base_channels=(16,), scale_choices=(1,))
    assert count_architectures(sp) == 1


def test_count_reduced_space_brute_force():
    sp = SearchSpace(num_units=2, kernel_choices=(3, 5), width_choices=(2, 4),
                     depth_choices=(1, 2), base_channels=(16, 24), scale_choices=(1, 2))
    brute = sum(1 for _ in enumerate_architectures(sp))
    assert brute == 400
    assert count_architectures(sp) == brute


def test_sample_deterministic():
    assert sample_uniform(SPACE, 7) == sample_uniform(SPACE, 7)
    assert sample_uniform(SPACE, 7) != sample_uniform(SPACE, 8)


def test_sample_kernel_frequencies_uniform():
    rng = np.random.default_rng(0)
    counts = {3: 0, 5: 0, 7: 0}
    n = 0
    while n < 10000:
        cfg = sample_uniform(SPACE, rng, dims=("kernel",))
        for ks in cfg.layer_kernels:
            for k in ks:
                counts[k] += 1
                n += 1
    for k, c in counts.items():
        assert abs(c / n - 1 / 3) < 0.05 / 3, counts


def test_kernel_stage_pins_other_dims():
    rng = np.random.default_rng(1)
    for _ in range(50):
        cfg = sample_uniform(SPACE, rng, dims=("kernel",))
        assert cfg.unit_depths == (4, 4, 4, 4)
        assert all(w == 8 for ws in cfg.layer_widths for w in ws)
        assert cfg.scale == 4 and cfg.refine_depth == 2


def test_sample_unknown_dim():
    with pytest.raises(ValueError):
        sample_uniform(SPACE, 0, dims=("colour",))


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_samples_always_valid(seed):
    validate(sample_uniform(SPACE, seed), SPACE)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_serialization_round_trip(seed):
    cfg = sample_uniform(SPACE, seed)
    text = cfg.to_json()
    assert ArchConfig.from_json(text) == cfg
    # key order is irrelevant
    d = json.loads(text)
    shuffled = json.dumps(dict(reversed(list(d.items()))))
    assert ArchConfig.from_json(shuffled) == cfg


def test_from_dict_rejects_missing_and_extra_keys():
    d = SPACE.max_config().to_dict()
    with pytest.raises(InvalidConfigError, match="missing"):
        ArchConfig.from_dict({k: v for k, v in d.items() if k != "scale"})
    with pytest.raises(InvalidConfigError, match="unknown"):
        ArchConfig.from_dict({**d, "extra": 1})
    with pytest.raises(InvalidConfigError):
        ArchConfig.from_json("[1, 2]")


def test_conv_cost_hand_count():
    assert conv_cost(2, 3, 1, (4, 4)) == (9, 96)
    assert conv_cost(2, 3, 1, (4, 4), bias=False) == (6, 96)
    # depthwise 3x3 over 4 channels on 2x2
    assert conv_cost(4, 4, 3, (2, 2), groups=4, bias=False) == (36, 144)


def test_cost_requires_divisible_input():
    with pytest.raises(ValueError, match="divisible"):
        estimate_cost(SPACE.max_config(), SPACE, (100, 144))
    # S=2 only needs multiples of 6
    estimate_cost(ArchConfig.uniform(SPACE, 7, 8, 4, 2, 2), SPACE, (30, 42))


def test_scale_two_cheaper_than_four():
    a = estimate_cost(ArchConfig.uniform(SPACE, 7, 8, 4, 2, 2), SPACE, HW)
    b = estimate_cost(ArchConfig.uniform(SPACE, 7, 8, 4, 4, 2), SPACE, HW)
    assert a.macs < b.macs and a.params < b.params


def _bump(cfg: ArchConfig, dim: str, rng):
    """A config that is >= cfg in ``dim`` and equal elsewhere, or None."""
    d = cfg.to_dict()
    if dim in ("kernel", "width"):
        key = "layer_kernels" if dim == "kernel" else "layer_widths"
        choices = SPACE.kernel_choices if dim == "kernel" else SPACE.width_choices
        u = int(rng.integers(4))
        i = int(rng.integers(len(d[key][u])))
        bigger = [c for c in choices if c > d[key][u][i]]
        if not bigger:
            return None
        d[key][u][i] = bigger[0]
    elif dim == "depth":
        u = int(rng.integers(4))
        if d["unit_depths"][u] == 4:
            return None
        d["unit_depths"][u] += 1
        d["layer_kernels"][u].append(3)
        d["layer_widths"][u].append(2)
    elif dim == "scale":
        if d["scale"] == 4:
            return None
        d["scale"] += 1
    else:
        if d["refine_depth"] == 2:
            return None
        d["refine_depth"] += 1
    return ArchConfig.from_dict(d)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(ELASTIC_DIMS))
def test_cost_monotone_in_each_dimension(seed, dim):
    rng = np.random.default_rng(seed)
    cfg = sample_uniform(SPACE, rng)
    big = _bump(cfg, dim, rng)
    if big is None:
        return
    a, b = estimate_cost(cfg, SPACE, HW), estimate_cost(big, SPACE, HW)
    assert a.macs <= b.macs
    assert a.params <= b.params


def test_cost_breakdown_sums():
    est = estimate_cost(SPACE.max_config(), SPACE, HW)
    assert sum(p for p, _ in est.breakdown.values()) == est.params
    assert sum(m for _, m in est.breakdown.values()) == est.macs
    assert est.params > 0 and est.macs > 0


def test_disparity_candidates():
    assert [SPACE.disparity_candidates(s) for s in (1, 2, 3, 4)] == [8, 4, 2, 1]
    assert SearchSpace(max_disparity=25).disparity_candidates(1) == 9
    assert math.prod([SPACE.downsample_factor(4)]) == 24
