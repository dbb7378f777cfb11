"""Patch grid sampling over tissue blobs."""

import numpy as np
import pytest

from prolifscore.patches import hpf_patch_side, sample_patch_centers
from prolifscore.tissue import BinaryMask, TissueBlob


def full_mask(w, h, downsample=1.0):
    bits = np.ones((h, w), dtype=bool)
    blob = TissueBlob(label=1, area_px=w * h, bbox=(0, 0, w, h), area_mm2=1.0)
    return BinaryMask(bits=bits, level=0, downsample=downsample), [blob]


def test_hpf_patch_side_values():
    assert hpf_patch_side(0.25) == 5657  # sqrt(2e6)/0.25 = 5656.85...
    assert hpf_patch_side(1.0) == 1414
    with pytest.raises(ValueError):
        hpf_patch_side(-1.0)
    with pytest.raises(ValueError):
        hpf_patch_side(1.0, area_mm2=0.0)


def test_single_patch_blob():
    mask, blobs = full_mask(100, 100)
    refs = sample_patch_centers(mask, blobs, "s", 100, 100, side=100, stride=100)
    assert len(refs) == 1
    assert (refs[0].cx, refs[0].cy) == (50, 50)


def test_three_by_three_grid():
    mask, blobs = full_mask(300, 300)
    refs = sample_patch_centers(mask, blobs, "s", 300, 300, side=100, stride=100)
    assert len(refs) == 9
    assert [(r.cx, r.cy) for r in refs[:3]] == [(50, 50), (150, 50), (250, 50)]


def test_patch_count_near_300_with_half_stride():
    """Tissue of ~75 patch-areas at stride side/2 lands within 300 +- 20%."""
    side = 64
    w = h = int(round(np.sqrt(75) * side))
    mask, blobs = full_mask(w, h)
    refs = sample_patch_centers(mask, blobs, "s", w, h, side=side, stride=side // 2)
    assert 240 <= len(refs) <= 360


def test_coverage_filter():
    bits = np.zeros((100, 100), dtype=bool)
    bits[:, :10] = True  # a 10 px strip: 10% coverage for a 100px patch
    blob = TissueBlob(label=1, area_px=1000, bbox=(0, 0, 100, 100), area_mm2=1.0)
    mask = BinaryMask(bits=bits, level=0, downsample=1.0)
    refs = sample_patch_centers(mask, [blob], "s", 100, 100, side=100, stride=100,
                                min_tissue_fraction=0.25)
    assert refs == []
    refs = sample_patch_centers(mask, [blob], "s", 100, 100, side=100, stride=100,
                                min_tissue_fraction=0.05)
    assert len(refs) == 1


def test_empty_mask_gives_empty_list():
    mask = BinaryMask(bits=np.zeros((50, 50), dtype=bool), level=0, downsample=1.0)
    assert sample_patch_centers(mask, [], "s", 50, 50, side=20, stride=20) == []


def test_border_patches_discarded():
    """Patches that would stick out past the slide are dropped, not padded."""
    mask, blobs = full_mask(250, 100)
    refs = sample_patch_centers(mask, blobs, "s", 250, 100, side=100, stride=100)
    assert len(refs) == 2  # 2 fit horizontally, the third would clip


def test_count_monotone_in_stride():
    mask, blobs = full_mask(400, 400)
    counts = [
        len(sample_patch_centers(mask, blobs, "s", 400, 400, side=100, stride=s))
        for s in (25, 50, 100, 200)
    ]
    assert counts == sorted(counts, reverse=True)


def test_stride_equals_side_tiles_without_overlap():
    mask, blobs = full_mask(500, 500)
    refs = sample_patch_centers(mask, blobs, "s", 500, 500, side=100, stride=100)
    for a in refs:
        for b in refs:
            if a.index == b.index:
                continue
            assert max(abs(a.cx - b.cx), abs(a.cy - b.cy)) >= 100


def test_every_patch_meets_coverage():
    rng = np.random.default_rng(3)
    bits = rng.random((80, 80)) < 0.5
    blob = TissueBlob(label=1, area_px=int(bits.sum()), bbox=(0, 0, 80, 80), area_mm2=1.0)
    mask = BinaryMask(bits=bits, level=0, downsample=2.0)
    refs = sample_patch_centers(mask, [blob], "s", 160, 160, side=40, stride=20,
                                min_tissue_fraction=0.25)
    for r in refs:
        x0, y0 = r.cx - 20, r.cy - 20
        window = bits[y0 // 2 : (y0 + 40) // 2, x0 // 2 : (x0 + 40) // 2]
        assert window.mean() >= 0.25


def test_stride_must_be_positive():
    mask, blobs = full_mask(100, 100)
    with pytest.raises(ValueError):
        sample_patch_centers(mask, blobs, "s", 100, 100, side=50, stride=0)
