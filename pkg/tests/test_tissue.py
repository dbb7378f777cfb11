"""Tissue segmentation: grayscale, Otsu vs brute force, dilation vs naive
oracle, and blob extraction on generated slides."""

import numpy as np
import pytest

from prolifscore.errors import DegenerateHistogramError
from prolifscore.slide import Pixmap, open_slide
from prolifscore.synth import DensityRegion, SyntheticSlideSpec, generate_synthetic_slide
from prolifscore.tissue import (
    binary_dilate,
    extract_tissue_blobs,
    otsu_threshold,
    to_grayscale,
)


def otsu_brute_force(hist):
    """Independent 256-way search maximizing between-class variance."""
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    values = np.arange(256, dtype=np.float64)
    best_t, best_v = None, -np.inf
    for t in range(1, 256):
        w0 = hist[:t].sum()
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        mu0 = (values[:t] * hist[:t]).sum() / w0
        mu1 = (values[t:] * hist[t:]).sum() / w1
        v = (w0 * w1) * ((mu0 - mu1) ** 2)
        if v > best_v:
            best_v, best_t = v, t
    return best_t


def dilate_naive(mask, r):
    """Literal definition: set iff any set pixel within Chebyshev r."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            y0, y1 = max(y - r, 0), min(y + r + 1, h)
            x0, x1 = max(x - r, 0), min(x + r + 1, w)
            out[y, x] = mask[y0:y1, x0:x1].any()
    return out


def test_grayscale_values():
    px = np.array([[[255, 255, 255], [255, 0, 0], [0, 255, 0], [0, 0, 255]]], dtype=np.uint8)
    gray = to_grayscale(Pixmap(px)).pixels
    assert gray[0, 0] == 255
    assert gray[0, 1] == 76  # round(0.299 * 255)
    assert gray[0, 2] == 150  # round(0.587 * 255)
    assert gray[0, 3] == 29  # round(0.114 * 255)


def test_grayscale_requires_rgb():
    with pytest.raises(ValueError):
        to_grayscale(Pixmap(np.zeros((4, 4), dtype=np.uint8)))


def test_otsu_two_spikes():
    hist = np.zeros(256, dtype=np.int64)
    hist[10] = 50
    hist[200] = 50
    t = otsu_threshold(hist)
    assert 10 < t <= 200
    assert t == otsu_brute_force(hist)


def test_otsu_degenerate():
    hist = np.zeros(256, dtype=np.int64)
    hist[42] = 1000
    with pytest.raises(DegenerateHistogramError):
        otsu_threshold(hist)


def test_otsu_bimodal_with_outlier():
    hist = np.zeros(256, dtype=np.int64)
    hist[30] = 400
    hist[220] = 300
    hist[128] = 1
    assert otsu_threshold(hist) == otsu_brute_force(hist)


def test_otsu_matches_brute_force_on_random_histograms():
    rng = np.random.default_rng(1234)
    for _ in range(300):
        hist = rng.integers(0, 50, size=256)
        if np.count_nonzero(hist) < 2:
            continue
        assert otsu_threshold(hist) == otsu_brute_force(hist)


def test_dilate_identity_and_single_pixel():
    mask = np.zeros((7, 7), dtype=bool)
    mask[3, 3] = True
    assert np.array_equal(binary_dilate(mask, 0), mask)
    d1 = binary_dilate(mask, 1)
    assert d1.sum() == 9 and d1[2:5, 2:5].all()


def test_dilate_matches_naive_oracle():
    rng = np.random.default_rng(7)
    mask = rng.random((32, 32)) < 0.1
    assert np.array_equal(binary_dilate(mask, 2), dilate_naive(mask, 2))


def test_dilate_extensive_and_monotone():
    rng = np.random.default_rng(8)
    mask = rng.random((40, 40)) < 0.05
    d1 = binary_dilate(mask, 1)
    d2 = binary_dilate(mask, 2)
    assert np.all(d1 >= mask)
    assert np.all(d2 >= d1)


def test_extract_single_disc_blob(tmp_path):
    spec = SyntheticSlideSpec(
        width=1600, height=1600, mpp=1.0, seed=5,
        regions=[DensityRegion("disc", (800, 800, 600), cell_density=200.0)],
        level_downsamples=(1, 4), slide_id="disc",
    )
    manifest_path, _ = generate_synthetic_slide(spec, tmp_path / "d")
    slide = open_slide(manifest_path)
    mask, blobs = extract_tissue_blobs(slide)
    assert len(blobs) == 1

    # IoU against the planted disc rasterized at mask resolution
    ds = mask.downsample
    ys, xs = np.mgrid[0 : mask.height, 0 : mask.width]
    cx, cy, r = 800 / ds, 800 / ds, 600 / ds
    disc = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r**2
    inter = np.count_nonzero(mask.bits & disc)
    union = np.count_nonzero(mask.bits | disc)
    assert inter / union >= 0.9


def test_extract_blank_slide_errors(tmp_path):
    spec = SyntheticSlideSpec(width=512, height=512, mpp=1.0, seed=1, regions=[],
                              level_downsamples=(1, 2), slide_id="blank")
    manifest_path, _ = generate_synthetic_slide(spec, tmp_path / "b")
    with pytest.raises(DegenerateHistogramError):
        extract_tissue_blobs(open_slide(manifest_path))


def test_extract_two_discs_sorted_by_area(tmp_path):
    spec = SyntheticSlideSpec(
        width=2000, height=1200, mpp=1.0, seed=9,
        regions=[
            DensityRegion("disc", (500, 600, 250), cell_density=200.0),
            DensityRegion("disc", (1450, 600, 400), cell_density=200.0),
        ],
        level_downsamples=(1, 4), slide_id="two",
    )
    manifest_path, _ = generate_synthetic_slide(spec, tmp_path / "t")
    mask, blobs = extract_tissue_blobs(open_slide(manifest_path))
    assert len(blobs) == 2
    assert blobs[0].area_px > blobs[1].area_px
    # the larger disc (radius 400) is the right-hand one
    assert blobs[0].bbox[0] > blobs[1].bbox[2] - blobs[1].bbox[0]


def test_cell_centers_inside_mask(tmp_path):
    spec = SyntheticSlideSpec(
        width=1200, height=1000, mpp=1.0, seed=21,
        regions=[DensityRegion("rect", (100, 100, 1100, 900), cell_density=150.0)],
        level_downsamples=(1, 4), slide_id="cover",
    )
    manifest_path, gt = generate_synthetic_slide(spec, tmp_path / "c")
    mask, _ = extract_tissue_blobs(open_slide(manifest_path))
    ds = mask.downsample
    for x, y in gt.cells:
        mx = min(int(x / ds), mask.width - 1)
        my = min(int(y / ds), mask.height - 1)
        assert mask.bits[my, mx]
