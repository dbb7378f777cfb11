"""Slide container: PNM round-trips, manifest validation, region reads,
and the synthetic generator's contracts."""

import json

import numpy as np
import pytest

from prolifscore import pnm
from prolifscore.errors import ConfigError, RegionError, SlideFormatError
from prolifscore.slide import (
    GroundTruth,
    load_ground_truth,
    open_slide,
    read_full_level,
    read_region,
    tile_grid,
    tile_name,
)
from prolifscore.synth import DensityRegion, SyntheticSlideSpec, generate_synthetic_slide


def small_spec(seed=7, **kw):
    defaults = dict(
        width=600,
        height=500,
        mpp=1.0,
        seed=seed,
        regions=[DensityRegion("rect", (50, 50, 550, 450), cell_density=300.0,
                               mitosis_density=10.0)],
        level_downsamples=(1, 4),
        tile_size=256,
        slide_id="s1",
    )
    defaults.update(kw)
    return SyntheticSlideSpec(**defaults)


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(37, 61, 3), dtype=np.uint8)
    pnm.write_pnm(tmp_path / "t.ppm", rgb)
    assert np.array_equal(pnm.read_pnm(tmp_path / "t.ppm"), rgb)
    assert pnm.read_pnm_size(tmp_path / "t.ppm") == (61, 37, 3)

    gray = rng.integers(0, 256, size=(10, 12), dtype=np.uint8)
    pnm.write_pnm(tmp_path / "t.pgm", gray)
    assert np.array_equal(pnm.read_pnm(tmp_path / "t.pgm"), gray)


def test_open_slide_round_trip(tmp_path):
    spec = small_spec()
    manifest_path, gt = generate_synthetic_slide(spec, tmp_path / "slide")
    slide = open_slide(manifest_path)
    assert slide.slide_id == "s1"
    assert slide.mpp_x == slide.mpp_y == 1.0
    assert len(slide.levels) == 2
    assert slide.levels[0].width == 600 and slide.levels[0].height == 500
    assert slide.levels[1].downsample == 4.0
    assert slide.tile_size == 256
    # ground truth file parses back identically
    gt2 = load_ground_truth(tmp_path / "slide" / "ground_truth.json")
    assert gt2.cells == gt.cells and gt2.mitoses == gt.mitoses
    assert gt2.score_class == gt.score_class


def test_open_slide_missing_tile(tmp_path):
    manifest_path, _ = generate_synthetic_slide(small_spec(), tmp_path / "slide")
    (tmp_path / "slide" / tile_name(0, 0, 1)).unlink()
    with pytest.raises(SlideFormatError, match="missing tile"):
        open_slide(manifest_path)


def test_open_slide_tile_dimension_mismatch(tmp_path):
    manifest_path, _ = generate_synthetic_slide(small_spec(), tmp_path / "slide")
    bad = np.zeros((10, 10, 3), dtype=np.uint8)
    pnm.write_pnm(tmp_path / "slide" / tile_name(0, 0, 0), bad)
    with pytest.raises(SlideFormatError, match="expected"):
        open_slide(manifest_path)


def test_open_slide_malformed_manifest(tmp_path):
    p = tmp_path / "manifest.json"
    p.write_text("{not json")
    with pytest.raises(SlideFormatError, match="malformed"):
        open_slide(p)
    with pytest.raises(SlideFormatError, match="not found"):
        open_slide(tmp_path / "nope.json")


def test_open_slide_rejects_bad_level_order(tmp_path):
    manifest_path, _ = generate_synthetic_slide(small_spec(), tmp_path / "slide")
    doc = json.loads(manifest_path.read_text())
    doc["levels"][1]["downsample"] = 0.5
    manifest_path.write_text(json.dumps(doc))
    with pytest.raises(SlideFormatError, match="strictly increase"):
        open_slide(manifest_path)


def test_read_region_stitch_oracle(tmp_path):
    """Full-level read equals tiles stitched by hand."""
    manifest_path, _ = generate_synthetic_slide(small_spec(), tmp_path / "slide")
    slide = open_slide(manifest_path)
    lv = slide.levels[1]
    got = read_full_level(slide, 1).pixels

    rows, cols = tile_grid(lv.width, lv.height, slide.tile_size)
    stitched = np.zeros((lv.height, lv.width, 3), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            tile = pnm.read_pnm(tmp_path / "slide" / tile_name(1, r, c))
            stitched[
                r * slide.tile_size : r * slide.tile_size + tile.shape[0],
                c * slide.tile_size : c * slide.tile_size + tile.shape[1],
            ] = tile
    assert np.array_equal(got, stitched)


def test_read_region_single_pixel_and_padding(tmp_path):
    manifest_path, _ = generate_synthetic_slide(small_spec(), tmp_path / "slide")
    slide = open_slide(manifest_path)
    tile0 = pnm.read_pnm(tmp_path / "slide" / tile_name(0, 0, 0))
    one = read_region(slide, 0, 5, 9, 1, 1).pixels
    assert np.array_equal(one[0, 0], tile0[9, 5])

    # straddling the right edge: out-of-bounds columns come back white
    region = read_region(slide, 0, 590, 0, 20, 4).pixels
    assert np.all(region[:, 10:] == 255)
    assert np.array_equal(region[:, :10], read_region(slide, 0, 590, 0, 10, 4).pixels)


def test_read_region_errors(tmp_path):
    manifest_path, _ = generate_synthetic_slide(small_spec(), tmp_path / "slide")
    slide = open_slide(manifest_path)
    with pytest.raises(RegionError):
        read_region(slide, 5, 0, 0, 10, 10)
    with pytest.raises(RegionError):
        read_region(slide, 0, 0, 0, 0, 10)


def test_read_region_pure(tmp_path):
    manifest_path, _ = generate_synthetic_slide(small_spec(), tmp_path / "slide")
    slide = open_slide(manifest_path)
    a = read_region(slide, 0, 100, 100, 64, 64).pixels
    b = read_region(slide, 0, 100, 100, 64, 64).pixels
    assert np.array_equal(a, b)


def test_generator_zero_density_uniform_background(tmp_path):
    spec = small_spec(regions=[])
    manifest_path, gt = generate_synthetic_slide(spec, tmp_path / "blank")
    assert gt.cells == [] and gt.mitoses == []
    slide = open_slide(manifest_path)
    pixels = read_full_level(slide, 0).pixels
    assert np.all(pixels == 255)


def test_generator_poisson_count_within_3_sigma(tmp_path):
    """1 mm^2 at 100 cells/mm^2: emitted count within [70, 130]."""
    spec = SyntheticSlideSpec(
        width=1100,
        height=1100,
        mpp=1.0,
        seed=123,
        regions=[DensityRegion("rect", (50, 50, 1050, 1050), cell_density=100.0)],
        level_downsamples=(1, 4),
        slide_id="poisson",
    )
    _, gt = generate_synthetic_slide(spec, tmp_path / "p")
    assert 70 <= len(gt.cells) <= 130


def test_generator_determinism(tmp_path):
    spec = small_spec(seed=99)
    generate_synthetic_slide(spec, tmp_path / "a")
    generate_synthetic_slide(small_spec(seed=99), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generator_mitoses_on_tissue(tmp_path):
    manifest_path, gt = generate_synthetic_slide(small_spec(seed=3), tmp_path / "s")
    slide = open_slide(manifest_path)
    pixels = read_full_level(slide, 0).pixels
    assert gt.mitoses
    for x, y in gt.mitoses:
        assert tuple(pixels[y, x]) != (255, 255, 255)


def test_generator_rejects_bad_spec(tmp_path):
    with pytest.raises(ConfigError):
        SyntheticSlideSpec(width=0, height=10, mpp=1.0, seed=0).validate()
    with pytest.raises(ConfigError):
        DensityRegion("rect", (0, 0, 10, 10), cell_density=-1.0)
    with pytest.raises(ConfigError):
        small_spec(level_downsamples=(1, 4, 4)).validate()


def test_ground_truth_score_defaults():
    gt = GroundTruth(score_class=2, score_continuous=8.0)
    doc = gt.to_json_dict()
    assert doc["score_class"] == 2 and doc["score_continuous"] == 8.0
