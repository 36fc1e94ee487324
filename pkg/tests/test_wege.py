import math

import numpy as np
import pytest
import pywt
from hypothesis import given, settings, strategies as st

from flair.activations import ActivationSpec
from flair.inrnet import build_model
from flair.tasks import pixel_grid
from flair.tensorgraph import ContractError
from flair.wege import (EnergyMap, band_reconstructions, bilateral_filter, build_energy_map, dump_maps, dwt2,
                        energy_map, guided_filter, idwt2, normalize_scores, sample_guidance, to_gray)


# -- naive oracles ------------------------------------------------------------

def naive_guided(guide, p, r, reg):
    """Per-window loops with edge-replicated indices."""
    h, w = guide.shape

    def window(img, i, j):
        rows = np.clip(np.arange(i - r, i + r + 1), 0, h - 1)
        cols = np.clip(np.arange(j - r, j + r + 1), 0, w - 1)
        return img[np.ix_(rows, cols)]

    a = np.zeros_like(guide)
    b = np.zeros_like(guide)
    for i in range(h):
        for j in range(w):
            I = window(guide, i, j)
            P = window(p, i, j)
            mi, mp_ = I.mean(), P.mean()
            a[i, j] = ((I * P).mean() - mi * mp_) / ((I * I).mean() - mi * mi + reg)
            b[i, j] = mp_ - a[i, j] * mi
    out = np.zeros_like(guide)
    for i in range(h):
        for j in range(w):
            out[i, j] = window(a, i, j).mean() * guide[i, j] + window(b, i, j).mean()
    return out


def naive_bilateral(s, ss, rs, r):
    h, w = s.shape
    out = np.zeros_like(s)
    for i in range(h):
        for j in range(w):
            num = den = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    q = s[min(max(i + dy, 0), h - 1), min(max(j + dx, 0), w - 1)]
                    wt = math.exp(-(dx * dx + dy * dy) / (2 * ss * ss)) * math.exp(-((q - s[i, j]) ** 2) / (2 * rs * rs))
                    num += wt * q
                    den += wt
            out[i, j] = num / den
    return out


# -- Haar ---------------------------------------------------------------------

def test_haar_one_block():
    a, b, c, d = 0.9, 0.2, 0.4, 0.7
    bands = dwt2(np.array([[a, b], [c, d]]))
    assert bands["LL"][0, 0] == pytest.approx((a + b + c + d) / 2, abs=1e-15)
    assert bands["LH"][0, 0] == pytest.approx((a + b - c - d) / 2, abs=1e-15)
    assert bands["HL"][0, 0] == pytest.approx((a - b + c - d) / 2, abs=1e-15)
    assert bands["HH"][0, 0] == pytest.approx((a - b - c + d) / 2, abs=1e-15)


def test_haar_constant_image():
    bands = dwt2(np.full((6, 8), 0.3))
    assert np.allclose(bands["LL"], 0.6, atol=1e-15)
    for k in ("LH", "HL", "HH"):
        assert np.all(bands[k] == 0)


def test_haar_agrees_with_pywavelets():
    img = np.random.default_rng(0).random((16, 12))
    ca, (ch, cv, cd) = pywt.dwt2(img, "haar")
    bands = dwt2(img)
    assert np.allclose(bands["LL"], ca, atol=1e-12)
    assert np.allclose(bands["LH"], ch, atol=1e-12)
    assert np.allclose(bands["HL"], cv, atol=1e-12)
    assert np.allclose(bands["HH"], cd, atol=1e-12)


def test_haar_perfect_reconstruction_100_images():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h, w = rng.integers(1, 65, 2)
        img = rng.random((h, w))
        bands = dwt2(img)
        assert bands["LL"].shape == (math.ceil(h / 2), math.ceil(w / 2))
        assert np.abs(idwt2(bands, img.shape) - img).max() < 1e-10


def test_empty_image_rejected():
    with pytest.raises(ContractError):
        dwt2(np.zeros((0, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_band_partition(h, w, seed):
    img = np.random.default_rng(seed).random((h, w))
    high, low = band_reconstructions(img)
    assert np.abs(high + low - img).max() < 1e-10
    # raw = I - 2 * low by linearity
    assert np.abs(energy_map(img) - (img - 2 * low)).max() < 1e-10


# -- energy and normalization -------------------------------------------------

def test_constant_image_energy():
    assert np.allclose(energy_map(np.full((8, 8), 0.4)), -0.4, atol=1e-15)


def test_impulse_energy_brute_force():
    img = np.zeros((8, 8))
    img[3, 4] = 1.0
    raw = energy_map(img)
    # impulse sits in block rows 2-3, cols 4-5: low part is 1/4 on the block
    assert raw[3, 4] == pytest.approx(0.5) and raw[3, 4] > 0
    for rc in ((2, 4), (2, 5), (3, 5)):
        assert raw[rc] == pytest.approx(-0.5)
    mask = np.zeros_like(img, bool)
    mask[2:4, 4:6] = True
    assert np.all(raw[~mask] == 0)


def test_luma_conversion():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 0] = 1
    assert np.allclose(to_gray(rgb), 0.299)


def test_normalize_examples():
    eps = 1e-8
    assert np.allclose(normalize_scores(np.array([0.0, 1.0]), eps), [0, 1 / (1 + eps)], rtol=0, atol=1e-16)
    assert np.all(normalize_scores(np.full((3, 3), 2.5)) == 0)
    out = normalize_scores(np.array([-1.0, 0.0, 3.0]), eps)
    assert np.allclose(out, np.array([0, 0.25, 1]) * 4 / (4 + eps), rtol=0, atol=1e-16)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalize_monotone_and_bounded(seed):
    raw = np.random.default_rng(seed).normal(size=50)
    out = normalize_scores(raw)
    order = np.argsort(raw, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)
    assert out.min() >= 0 and out.max() <= 1


# -- filters ------------------------------------------------------------------

@pytest.mark.parametrize("r", [1, 2, 4])
def test_guided_matches_oracle(r):
    rng = np.random.default_rng(r)
    for h, w in ((8, 8), (16, 16), (9, 13)):
        guide = rng.random((h, w))
        scores = rng.random((h, w))
        assert np.abs(guided_filter(guide, scores, r, 1e-3) - naive_guided(guide, scores, r, 1e-3)).max() < 1e-10


def test_guided_step_edge_oracle():
    guide = np.zeros((8, 8))
    guide[:, 4:] = 1.0
    scores = guide + 0.1 * np.random.default_rng(0).normal(size=(8, 8))
    assert np.abs(guided_filter(guide, scores, 2, 1e-3) - naive_guided(guide, scores, 2, 1e-3)).max() < 1e-10


def test_guided_constant_and_large_reg():
    rng = np.random.default_rng(3)
    guide = rng.random((12, 12))
    assert np.allclose(guided_filter(guide, np.full((12, 12), 0.7), 2, 1e-3), 0.7, atol=1e-12)
    scores = rng.random((12, 12))
    from scipy.ndimage import uniform_filter
    box = uniform_filter(uniform_filter(scores, 5, mode="nearest"), 5, mode="nearest")
    assert np.abs(guided_filter(guide, scores, 2, 1e12) - box).max() < 1e-9


def test_guided_radius_contract():
    with pytest.raises(ContractError):
        guided_filter(np.zeros((4, 6)), np.zeros((4, 6)), 4, 1e-3)


@pytest.mark.parametrize("size", [8, 16])
def test_bilateral_matches_oracle(size):
    s = np.random.default_rng(size).random((size, size))
    for ss, rs in ((1.0, 0.1), (2.0, 0.3)):
        r = math.ceil(2 * ss)
        assert np.abs(bilateral_filter(s, ss, rs) - naive_bilateral(s, ss, rs, r)).max() < 1e-10


def test_bilateral_constant_and_infinite_range():
    assert np.allclose(bilateral_filter(np.full((6, 6), 0.2)), 0.2, atol=1e-15)
    s = np.random.default_rng(9).random((10, 10))
    blur = naive_bilateral(s, 1.5, 1e300, 3)
    assert np.abs(bilateral_filter(s, 1.5, math.inf) - blur).max() < 1e-10


# -- end to end ---------------------------------------------------------------

@pytest.mark.parametrize("method", ["guided", "bilateral", "none"])
def test_constant_image_gives_zero_guidance(method):
    emap = build_energy_map(np.full((16, 16, 3), 0.6), method=method)
    assert np.all(emap.normalized == 0)
    assert np.all(emap.filtered == 0)


def test_energy_map_immutable_and_bounded():
    img = np.random.default_rng(0).random((16, 16, 3))
    emap = build_energy_map(img)
    assert 0 <= emap.normalized.min() and emap.normalized.max() <= 1
    assert emap.filtered.shape == emap.raw.shape
    with pytest.raises(ValueError):
        emap.filtered[0, 0] = 1.0


def test_sample_guidance_knots_and_midpoints():
    grid = np.random.default_rng(1).random((6, 8))
    coords = pixel_grid(6, 8)
    assert np.array_equal(sample_guidance(grid, coords)[:, 0], grid.ravel())
    # midpoint between columns 2 and 3 of row 4
    x = ((2.5 + 0.5) / 8) * 2 - 1
    y = ((4 + 0.5) / 6) * 2 - 1
    mid = sample_guidance(grid, np.array([[x, y]]))[0, 0]
    assert mid == pytest.approx((grid[4, 2] + grid[4, 3]) / 2, abs=1e-15)
    flat = sample_guidance(np.full((5, 5), 0.3), np.random.default_rng(2).uniform(-1, 1, (40, 2)))
    assert np.allclose(flat, 0.3, rtol=0, atol=1e-16)


def test_wege_adds_one_channel_and_first_layer_width_params():
    base = build_model(2, 3, ActivationSpec(), hidden_width=256)
    wege = build_model(3, 3, ActivationSpec(), hidden_width=256)
    assert wege.parameter_count() - base.parameter_count() == 256
    assert wege.encoded_dim() == base.encoded_dim() + 1


def test_dump_maps(tmp_path):
    emap = build_energy_map(np.random.default_rng(0).random((16, 16)))
    paths = dump_maps(emap, tmp_path)
    assert len(paths) == 6 and all(p.exists() for p in paths)
    back = np.loadtxt(tmp_path / "wege_raw.csv", delimiter=",")
    assert np.allclose(back, emap.raw, atol=1e-9)
