import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from revdistill.distill import AnomalyMapSet
from revdistill.errors import DataError, ShapeError
from revdistill.scoring import (
    ScoreMap,
    detection_score,
    export_heatmap,
    localization_map,
    novelty_score,
    read_sal,
    upsample,
    write_sal,
)


def bilinear_axis_weights(n_in, n_out):
    """Hand-rolled half-pixel-centre interpolation matrix (n_out x n_in)."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        x = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(x))
        hi = min(lo + 1, n_in - 1)
        frac = x - lo
        w[i, lo] += 1 - frac
        w[i, hi] += frac
    return w


def random_maps(seed, sizes=(16, 8, 4), batch=None):
    rng = np.random.default_rng(seed)
    lead = () if batch is None else (batch,)
    return [rng.uniform(0, 2, lead + (s, s)) for s in sizes]


def test_zero_maps():
    s = localization_map([np.zeros((8, 8)), np.zeros((4, 4)), np.zeros((2, 2))], 32)
    assert np.all(s.map == 0)
    assert detection_score(s) == 0.0
    assert novelty_score(s) == 0.0


def test_unit_maps_sum_to_k():
    s = localization_map([np.ones((8, 8)), np.ones((4, 4)), np.ones((2, 2))], 32, sigma=4)
    assert np.allclose(s.map, 3.0, atol=1e-12)
    assert s.smoothed and s.sigma == 4.0


def test_two_by_two_corner_pattern():
    s = localization_map([np.array([[0.0, 0.0], [0.0, 1.0]])], 4, sigma=0)
    axis = np.array([0.0, 0.25, 0.75, 1.0])
    assert np.allclose(s.map, np.outer(axis, axis), atol=1e-12)
    assert not s.smoothed


@pytest.mark.parametrize("n_in,n_out", [(2, 4), (3, 8), (4, 16), (5, 7)])
def test_upsample_matches_weight_matrix(n_in, n_out):
    m = np.random.default_rng(n_in).normal(size=(n_in, n_in))
    w = bilinear_axis_weights(n_in, n_out)
    assert np.allclose(upsample(m, n_out), w @ m @ w.T, atol=1e-12)


def test_downsampling_forbidden():
    with pytest.raises(ShapeError):
        localization_map([np.zeros((8, 8))], 4)
    with pytest.raises(ShapeError):
        localization_map([], 4)


def test_accepts_map_set_and_batches():
    maps = AnomalyMapSet([torch.rand(3, 8, 8), torch.rand(3, 4, 4)], (1, 2))
    s = localization_map(maps, 16)
    assert s.map.shape == (3, 16, 16)
    assert detection_score(s).shape == (3,)
    assert np.isclose(detection_score(s[1]), s.map[1].max())
    assert len(s) == 3


def test_detection_is_max_and_position_free():
    grid = np.zeros((16, 16))
    grid[3, 7] = 5.0
    assert detection_score(ScoreMap(grid, True, 4.0)) == 5.0
    for _ in range(5):
        i, j = np.random.default_rng(_).integers(0, 16, 2)
        moved = np.zeros((16, 16))
        moved[i, j] = 5.0
        assert detection_score(ScoreMap(moved, True, 4.0)) == 5.0


def test_novelty_constant_and_loop():
    c, r = 0.37, 24
    assert novelty_score(ScoreMap(np.full((r, r), c), False, 0.0)) == pytest.approx(c * r * r, rel=1e-12)
    m = np.random.default_rng(3).uniform(size=(r, r))
    loop = 0.0
    for i in range(r):
        for j in range(r):
            loop += float(m[i, j])
    assert novelty_score(ScoreMap(m, False, 0.0)) == pytest.approx(loop, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0, 50))
def test_linearity(seed, alpha):
    maps = random_maps(seed)
    base = localization_map(maps, 32).map
    scaled = localization_map([alpha * m for m in maps], 32).map
    assert np.allclose(scaled, alpha * base, atol=1e-6)


@pytest.mark.parametrize("sigma", [1.0, 2.0, 4.0])
def test_mass_preserved_for_interior_support(sigma):
    r = 128
    m = np.zeros((r, r))
    rng = np.random.default_rng(int(sigma))
    m[40:88, 40:88] = rng.uniform(size=(48, 48))
    before = m.sum()
    after = localization_map([m], r, sigma=sigma).map.sum()
    assert abs(after - before) / before < 1e-4


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), bump=st.floats(0, 3), stage=st.integers(0, 2))
def test_raising_an_entry_never_lowers_detection(seed, bump, stage):
    maps = random_maps(seed)
    before = detection_score(localization_map(maps, 32))
    rng = np.random.default_rng(seed + 1)
    i, j = rng.integers(0, maps[stage].shape[0], 2)
    maps[stage] = maps[stage].copy()
    maps[stage][i, j] += bump
    assert detection_score(localization_map(maps, 32)) >= before - 1e-12


def test_sal_round_trip(tmp_path):
    m = np.random.default_rng(0).uniform(size=(12, 12)).astype(np.float32)
    p = write_sal(tmp_path / "x.sal.f32", m)
    raw = p.read_bytes()
    assert raw.startswith(b"12 12\n")
    assert len(raw) == len(b"12 12\n") + 4 * 144
    assert np.array_equal(read_sal(p), m)
    assert np.frombuffer(raw[6:], dtype="<f4")[5] == m.ravel()[5]


def test_sal_errors(tmp_path):
    bad = tmp_path / "bad.sal.f32"
    bad.write_bytes(b"4 4\n" + b"\0" * 8)
    with pytest.raises(DataError):
        read_sal(bad)
    with pytest.raises(ShapeError):
        write_sal(tmp_path / "y", np.zeros((2, 2, 2)))


def test_png_export(tmp_path):
    m = np.linspace(0, 3, 64 * 64).reshape(64, 64)
    png, sal = export_heatmap(tmp_path, "img", m)
    im = Image.open(png)
    assert im.size == (64, 64) and im.mode == "L"
    arr = np.asarray(im)
    assert arr.min() == 0 and arr.max() == 255
    assert read_sal(sal).shape == (64, 64)
    flat, _ = export_heatmap(tmp_path, "flat", np.ones((8, 8)))
    assert np.asarray(Image.open(flat)).max() == 0
