import struct

import numpy as np
import pytest

from elastic_stereo.data import (
    GRID, DisparityField, PFMError, epe, generate_rds, left_disparity, load_dataset,
    make_dataset, read_pfm, sample_rows, save_dataset, to_tensors, write_pfm,
)


def test_zero_disparity_right_equals_left():
    s = generate_rds(1, 24, 48, 8, disparity=0.0)
    assert np.array_equal(s.right, s.left)
    assert s.valid.all()


def test_constant_integer_shift():
    s = generate_rds(2, 24, 48, 8, disparity=3.0)
    # right column x shows left column x + 3 wherever that is inside the frame
    assert np.array_equal(s.right[:, :45], s.left[:, 3:48])
    assert np.all(s.disparity == 3.0)
    assert not s.valid[:, :3].any() and s.valid[:, 3:].all()


@pytest.mark.parametrize("seed", range(5))
def test_warp_consistency(seed):
    """Rebuild the right view from the left one and the generating field."""
    s = generate_rds(seed, 48, 72, 24)
    rng = np.random.default_rng(seed)
    field = DisparityField(rng, 48, 72, 24)  # same draws as inside the generator
    y, x = np.mgrid[0:48, 0:72].astype(np.float64)
    src = x + field(x, y)
    rebuilt = sample_rows(s.left, src)
    inside = src <= 71
    assert np.abs(rebuilt - s.right)[inside].max() < 1e-6
    # left-grid ground truth satisfies d = f(x - d) on valid pixels
    resid = np.abs(s.disparity - field(x - s.disparity, y))
    assert resid[s.valid].max() < 1e-6
    # and maps each valid left pixel onto the right pixel showing the same point
    xr = x - s.disparity
    back = sample_rows(s.left, xr + field(xr, y))
    assert np.abs(back - s.left)[s.valid].max() < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_sample_invariants(seed):
    s = generate_rds(seed, 48, 48, 24)
    assert s.left.shape == s.right.shape == (48, 48, 3)
    assert s.valid.mean() >= 0.5
    d = s.disparity[s.valid]
    assert np.isfinite(d).all() and d.min() >= 0 and d.max() <= 23
    assert 0 <= s.left.min() and s.left.max() <= 1


def test_deterministic_per_seed():
    a, b = generate_rds(9, 24, 24, 8), generate_rds(9, 24, 24, 8)
    assert np.array_equal(a.right, b.right) and np.array_equal(a.disparity, b.disparity)
    assert not np.array_equal(a.left, generate_rds(10, 24, 24, 8).left)


def test_generate_errors():
    with pytest.raises(ValueError, match="divisible"):
        generate_rds(0, 30, 48, 8)
    with pytest.raises(ValueError):
        generate_rds(0, 24, 24, 1)
    assert GRID == 24


def test_fixed_point_contraction():
    f = lambda x, y: 2.0 + 0.5 * np.sin(x / 5.0)
    d = left_disparity(f, 1, 30)
    x = np.arange(30.0)[None]
    assert np.abs(d - f(x - d, 0)).max() < 1e-12


# -- epe ---------------------------------------------------------------------

def test_epe_examples():
    t = np.random.default_rng(0).random((5, 5))
    assert epe(t, t) == 0.0
    assert epe(t + 1, t) == pytest.approx(1.0)


def test_epe_loop_oracle():
    rng = np.random.default_rng(1)
    pred, tgt = rng.random((4, 4)) * 10, rng.random((4, 4)) * 10
    valid = np.ones((4, 4), bool)
    valid[0, 1] = valid[2, 2] = valid[3, 0] = False
    total = 0.0
    for i in range(4):
        for j in range(4):
            if valid[i, j]:
                total += abs(pred[i, j] - tgt[i, j])
    assert epe(pred, tgt, valid) == total / 13


def test_epe_errors_and_nonfinite_default():
    with pytest.raises(ValueError):
        epe(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="empty"):
        epe(np.zeros(3), np.full(3, np.inf))
    assert epe(np.zeros(3), np.array([1.0, np.inf, 3.0])) == 2.0


# -- PFM ---------------------------------------------------------------------

def _handmade_pfm(path, values, scale):
    h, w = values.shape
    fmt = "<" if scale < 0 else ">"
    rows = [struct.pack(f"{fmt}{w}f", *row) for row in values[::-1]]
    path.write_bytes(b"Pf\n" + f"{w} {h}\n{scale}\n".encode() + b"".join(rows))


@pytest.mark.parametrize("scale", [-1.0, 1.0])
def test_pfm_handmade_both_endians(tmp_path, scale):
    vals = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    p = tmp_path / "a.pfm"
    _handmade_pfm(p, vals, scale)
    data, sc = read_pfm(p)
    assert sc == scale
    assert np.array_equal(data, vals)


@pytest.mark.parametrize("scale", [-1.0, 2.0])
def test_pfm_round_trip_bit_exact(tmp_path, scale):
    vals = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
    vals[0, 0] = np.inf
    p = tmp_path / "r.pfm"
    write_pfm(p, vals, scale)
    data, sc = read_pfm(p)
    assert sc == scale
    assert data.tobytes() == vals.tobytes()


def test_pfm_errors(tmp_path):
    p = tmp_path / "c.pfm"
    p.write_bytes(b"PF\n2 2\n-1\n" + b"\0" * 48)
    with pytest.raises(PFMError, match="unsupported: color PFM"):
        read_pfm(p)
    p.write_bytes(b"Pf\n2 2\n-1\n" + b"\0" * 15)
    with pytest.raises(PFMError, match="truncated payload"):
        read_pfm(p)
    p.write_bytes(b"P6\n2 2\n-1\n")
    with pytest.raises(PFMError, match="malformed header"):
        read_pfm(p)
    p.write_bytes(b"Pf\ntwo 2\n-1\n")
    with pytest.raises(PFMError):
        read_pfm(p)


def test_dataset_layout_round_trip(tmp_path):
    samples = make_dataset(3, 0, 24, 48, 8)
    base = save_dataset(samples, tmp_path, "train")
    assert sorted(p.name for p in (base / "disp").iterdir()) == ["0000.pfm", "0001.pfm", "0002.pfm"]
    assert (base / "left" / "0002.png").is_file() and (base / "right" / "0000.png").is_file()
    loaded = load_dataset(tmp_path, "train", 8)
    assert len(loaded) == 3
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.valid, b.valid)
        np.testing.assert_allclose(b.disparity[b.valid], a.disparity[a.valid], rtol=1e-6)
        assert np.abs(a.left - b.left).max() <= 0.5 / 255 + 1e-12
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path, "val")


def test_to_tensors_layout():
    left, right, disp, valid = to_tensors(make_dataset(2, 0, 24, 24, 8))
    assert left.shape == (2, 3, 24, 24) and disp.shape == (2, 24, 24)
    assert valid.dtype.is_floating_point is False
    assert (disp[~valid] == 0).all()
