import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from elastic_stereo.cost_volume import correlate, correlation, num_candidates


def test_candidate_counts():
    assert [num_candidates(24, s) for s in (1, 2, 3, 4)] == [8, 4, 2, 1]
    assert [num_candidates(192, s) for s in (1, 2, 3, 4)] == [64, 32, 16, 8]
    assert num_candidates(25, 1) == 9
    assert num_candidates(1, 4) == 1


def test_all_ones_shift_zero():
    f = torch.ones(1, 4, 3, 5)
    c = correlation(f, f, 3)
    assert torch.all(c[:, 0] == 1.0)


def test_off_frame_shifts_zero():
    g = torch.Generator().manual_seed(0)
    fl, fr = torch.randn(2, 3, 4, 6, generator=g), torch.randn(2, 3, 4, 6, generator=g)
    c = correlation(fl, fr, 8)
    for d in range(8):
        assert torch.all(c[:, d, :, :min(d, 6)] == 0)


def _loop_oracle(fl, fr, cands):
    b, n, h, w = fl.shape
    out = np.zeros((b, cands, h, w))
    for bi in range(b):
        for d in range(cands):
            for y in range(h):
                for x in range(w):
                    if x - d >= 0:
                        out[bi, d, y, x] = sum(fl[bi, c, y, x] * fr[bi, c, y, x - d]
                                               for c in range(n)) / n
    return out


def test_loop_oracle_small():
    rng = np.random.default_rng(0)
    fl = rng.standard_normal((1, 2, 1, 4))
    fr = rng.standard_normal((1, 2, 1, 4))
    c = correlation(torch.from_numpy(fl), torch.from_numpy(fr), 3).numpy()
    np.testing.assert_allclose(c, _loop_oracle(fl, fr, 3), rtol=1e-15, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 4), st.integers(1, 7), st.integers(1, 9))
def test_loop_oracle_random(seed, n, w, cands):
    rng = np.random.default_rng(seed)
    fl = rng.standard_normal((1, n, 2, w))
    fr = rng.standard_normal((1, n, 2, w))
    c = correlation(torch.from_numpy(fl), torch.from_numpy(fr), cands).numpy()
    np.testing.assert_allclose(c, _loop_oracle(fl, fr, cands), rtol=1e-12, atol=1e-12)


def test_self_correlation_and_linearity():
    g = torch.Generator().manual_seed(1)
    f = torch.randn(1, 5, 3, 4, generator=g, dtype=torch.float64)
    c = correlation(f, f, 2)
    assert torch.allclose(c[:, 0], (f * f).sum(1) / 5)
    assert torch.all(c[:, 0] >= 0)
    fr = torch.randn(1, 5, 3, 4, generator=g, dtype=torch.float64)
    assert torch.allclose(correlation(2.5 * f, fr, 3), 2.5 * correlation(f, fr, 3))


def test_pyramid_shapes_and_errors():
    left = [torch.randn(1, c, 12 // 2 ** s, 24 // 2 ** s) for s, c in enumerate((4, 6, 8, 10))]
    vols = correlate(left, left, 24)
    assert [v.shape[1] for v in vols] == [8, 4, 2, 1]
    assert all(torch.isfinite(v).all() for v in vols)
    with pytest.raises(ValueError, match="mismatch"):
        correlate(left, left[:3], 24)
    with pytest.raises(ValueError):
        correlate(left, left, 0)
