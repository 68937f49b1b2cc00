import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter
from skimage import color as skcolor

from hmdsynth.color import LabImage, gray_to_L, lab_to_rgb, rgb_to_lab
from hmdsynth.compose import (
    BACKGROUND,
    HEAD_REF,
    QUERY_KEEP,
    ComposeError,
    LaplacianPyramid,
    blend_pyramid,
    feathered_weights,
    match_histogram,
    replace_background,
)

from conftest import seeds


# -- Lab ------------------------------------------------------------------------------------------


def test_lab_matches_skimage():
    rgb = np.random.default_rng(0).random((32, 32, 3))
    assert np.allclose(rgb_to_lab(rgb), skcolor.rgb2lab(rgb), atol=1e-3)
    lab = skcolor.rgb2lab(rgb)
    assert np.allclose(lab_to_rgb(lab), skcolor.lab2rgb(lab), atol=1e-4)


def test_lab_known_values():
    # the 6-digit sRGB matrix leaves a ~5e-3 chroma residual on white (skimage shows the same)
    assert np.allclose(rgb_to_lab(np.array([1.0, 1.0, 1.0])), [100.0, 0.0, 0.0], atol=1e-2)
    assert np.allclose(rgb_to_lab(np.array([0.0, 0.0, 0.0])), [0.0, 0.0, 0.0], atol=1e-9)
    assert np.allclose(gray_to_L(np.array([0, 255])), [0.0, 100.0], atol=1e-3)


@given(seeds)
@settings(max_examples=50)
def test_lab_round_trip_8bit(seed):
    rgb = np.random.default_rng(seed).integers(0, 256, (16, 16, 3)).astype(np.uint8)
    back = LabImage.from_rgb8(rgb).to_rgb8()
    assert np.abs(back.astype(int) - rgb.astype(int)).max() <= 1


def test_lab_image_clamps_and_validates():
    img = LabImage(np.full((2, 2), 120.0), np.full((2, 2), -200.0), np.zeros((2, 2)))
    assert img.L.max() == 100.0 and img.a.min() == -128.0
    with pytest.raises(ValueError):
        LabImage(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


# -- pyramids -------------------------------------------------------------------------------------


@pytest.mark.parametrize("levels", [1, 2, 4, 6])
def test_pyramid_round_trip_full_size(levels):
    img = np.random.default_rng(levels).integers(0, 256, (960, 1280)).astype(float)
    back = LaplacianPyramid.build(img, levels).collapse()
    assert np.abs(back - img).max() <= 1.0


def test_pyramid_matches_opencv_down():
    img = np.random.default_rng(0).random((64, 96))
    lp = LaplacianPyramid.build(img, 3)
    ref = cv2.pyrDown(cv2.pyrDown(img, borderType=cv2.BORDER_REFLECT_101), borderType=cv2.BORDER_REFLECT_101)
    assert np.allclose(lp.levels[-1], ref, atol=1e-12)


def _naive_multiband(a, b, w, levels):
    """Oracle: multi-band blend built from OpenCV's pyramid primitives."""
    def gp(x):
        g = [x]
        for _ in range(levels - 1):
            g.append(cv2.pyrDown(g[-1], borderType=cv2.BORDER_REFLECT_101))
        return g

    def lp(x):
        g = gp(x)
        return [g[i] - cv2.pyrUp(g[i + 1], dstsize=g[i].shape[::-1]) for i in range(levels - 1)] + [g[-1]]

    la, lb, gw = lp(a), lp(b), gp(w)
    bands = [gw[i] * la[i] + (1 - gw[i]) * lb[i] for i in range(levels)]
    out = bands[-1]
    for band in reversed(bands[:-1]):
        out = band + cv2.pyrUp(out, dstsize=band.shape[::-1])
    return out


def test_step_blend_matches_multiband_oracle():
    H, W = 64, 256
    black, white = np.zeros((H, W)), np.full((H, W), 255.0)
    w = np.zeros((H, W))
    w[:, : W // 2] = 1.0
    ours = blend_pyramid([black, white], np.array([w, 1 - w]), levels=5)
    ref = _naive_multiband(black, white, w, 5)
    row = H // 2
    assert np.abs(ours[row] - ref[row]).max() <= 2.0
    # seam is softened: a monotone ramp from black to white
    assert np.all(np.diff(ours[row]) >= -1e-6)


def test_blend_single_source_and_identical_sources():
    img = np.random.default_rng(1).integers(0, 256, (80, 120, 3)).astype(float)
    one = blend_pyramid([img], np.ones((1, 80, 120)), levels=5)
    assert np.abs(one - img).max() <= 1.0
    w = np.random.default_rng(2).random((80, 120))
    two = blend_pyramid([img, img], np.array([w, 1 - w]), levels=5)
    assert np.abs(two - img).max() <= 1.0


def test_blend_overshoot_rare():
    rng = np.random.default_rng(3)
    a = gaussian_filter(rng.random((120, 160)) * 255, 3)
    b = gaussian_filter(rng.random((120, 160)) * 255, 3)
    labels = np.zeros((120, 160), int)
    labels[30:90, 40:120] = 1
    m = feathered_weights(labels, [[0], [1]], band=8)
    out = blend_pyramid([a, b], m, levels=5)
    lo = np.minimum(minimum_filter(a, 5), minimum_filter(b, 5))
    hi = np.maximum(maximum_filter(a, 5), maximum_filter(b, 5))
    bad = (out < lo - 2) | (out > hi + 2)
    assert bad.mean() <= 0.001


def test_blend_size_mismatch():
    with pytest.raises(ComposeError):
        blend_pyramid([np.zeros((10, 10)), np.zeros((10, 12))], np.ones((2, 10, 10)) / 2)


# -- masks ----------------------------------------------------------------------------------------


def test_feathered_weights_partition_and_ramp():
    labels = np.full((40, 60), BACKGROUND)
    labels[:, 30:] = HEAD_REF
    labels[15:25, 5:15] = QUERY_KEEP
    m = feathered_weights(labels, [[BACKGROUND], [HEAD_REF], [QUERY_KEEP]], band=6)
    assert np.allclose(m.weights.sum(0), 1.0, atol=1e-6)
    assert np.all((m.weights >= 0) & (m.weights <= 1))
    row = m.weights[1, 5]
    assert np.all(np.diff(row) >= -1e-12)
    ramp = row[(row > 0) & (row < 1)]
    assert 0 < len(ramp) <= 6
    assert m.dump_png().shape == (40, 60, 3)


def test_feathered_weights_hard_edges():
    labels = np.zeros((10, 10), int)
    labels[:, 5:] = 1
    m = feathered_weights(labels, [[0], [1]], band=0)
    assert set(np.unique(m.weights)) <= {0.0, 1.0}


# -- histogram matching ---------------------------------------------------------------------------


def test_histogram_identity():
    img = np.random.default_rng(0).integers(0, 256, (50, 50, 3)).astype(float)
    mask = np.ones((50, 50), bool)
    assert np.abs(match_histogram(img, img, mask) - img).max() <= 1.0


def test_histogram_shift_removed():
    rng = np.random.default_rng(1)
    tgt = rng.integers(0, 200, (60, 60)).astype(float)
    src = np.clip(tgt + 30, 0, 255)
    out = match_histogram(src, tgt, np.ones_like(tgt, bool))
    assert np.abs(out - tgt).max() <= 1.0


def _hist_l1(a, b):
    ha = np.histogram(a, bins=64, range=(0, 256))[0] / a.size
    hb = np.histogram(b, bins=64, range=(0, 256))[0] / b.size
    return np.abs(ha - hb).sum()


@given(seeds)
@settings(max_examples=30)
def test_histogram_distance_shrinks(seed):
    rng = np.random.default_rng(seed)
    src = np.clip(rng.normal(rng.uniform(60, 190), rng.uniform(10, 40), (64, 64)), 0, 255)
    tgt = np.clip(rng.gamma(3.0, rng.uniform(10, 30), (64, 64)), 0, 255)
    mask = rng.random((64, 64)) < 0.6
    before = _hist_l1(src[mask], tgt[mask])
    after = _hist_l1(match_histogram(src, tgt, mask)[mask], tgt[mask])
    assert after <= 0.05 * before + 1e-12


def test_histogram_empty_mask():
    with pytest.raises(ComposeError):
        match_histogram(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), bool))


# -- background replacement -----------------------------------------------------------------------


def test_replace_background():
    rng = np.random.default_rng(0)
    q, p = rng.random((20, 30, 3)), rng.random((20, 30, 3))
    assert np.array_equal(replace_background(q, p, np.ones((20, 30))), q)
    assert np.array_equal(replace_background(q, p, np.zeros((20, 30))), p)
    w = rng.random((20, 30))
    out = replace_background(q, p, w)
    for y, x in [(0, 0), (5, 17), (19, 29)]:
        assert np.allclose(out[y, x], w[y, x] * q[y, x] + (1 - w[y, x]) * p[y, x])
    assert np.array_equal(replace_background(q, None, w), q)
