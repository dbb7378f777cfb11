"""Multi-resolution tiled slide container: manifest parsing and region reads.

A slide is a directory holding a ``manifest.json`` plus P6 tiles named
``L{level}_r{row}_c{col}.ppm``. Level 0 is full resolution; coarser levels
carry strictly increasing downsample factors. Reads outside the level bounds
come back white (255), matching the glass background of a real scan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RegionError, SlideFormatError
from .pnm import read_pnm, read_pnm_size

BACKGROUND = 255


@dataclass(frozen=True)
class Pixmap:
    """8-bit image, gray (h, w) or RGB (h, w, 3), row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.dtype != np.uint8:
            raise ValueError("Pixmap requires uint8 pixels")
        if p.ndim == 2:
            return
        if p.ndim == 3 and p.shape[2] == 3:
            return
        raise ValueError(f"Pixmap shape {p.shape} is neither gray nor RGB")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3


@dataclass(frozen=True)
class LevelInfo:
    level: int
    width: int
    height: int
    downsample: float


@dataclass(frozen=True)
class SlidePyramid:
    """Validated view of one slide directory."""

    slide_id: str
    levels: tuple[LevelInfo, ...]
    mpp_x: float
    mpp_y: float
    tile_size: int
    manifest_path: Path

    @property
    def tile_dir(self) -> Path:
        return self.manifest_path.parent

    def level_info(self, level: int) -> LevelInfo:
        if not 0 <= level < len(self.levels):
            raise RegionError(f"level {level} out of range [0, {len(self.levels)})")
        return self.levels[level]


def tile_name(level: int, row: int, col: int) -> str:
    return f"L{level}_r{row}_c{col}.ppm"


def tile_grid(width: int, height: int, tile_size: int) -> tuple[int, int]:
    """Number of (rows, cols) of tiles covering a level."""
    return math.ceil(height / tile_size), math.ceil(width / tile_size)


def open_slide(manifest_path) -> SlidePyramid:
    """Parse and validate a slide manifest.

    Every referenced tile must exist and match the dimensions implied by the
    level size and tile grid; only headers are read, not pixel data.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise SlideFormatError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SlideFormatError(f"malformed manifest: {exc}") from exc

    try:
        slide_id = str(doc["slide"])
        mpp_x = float(doc["mpp_x"])
        mpp_y = float(doc["mpp_y"])
        tile_size = int(doc["tile_size"])
        raw_levels = doc["levels"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SlideFormatError(f"manifest missing/invalid field: {exc}") from exc

    if mpp_x <= 0 or mpp_y <= 0:
        raise SlideFormatError("mpp_x and mpp_y must be > 0")
    if tile_size <= 0:
        raise SlideFormatError("tile_size must be > 0")
    if not raw_levels:
        raise SlideFormatError("manifest declares no levels")

    levels = []
    for i, entry in enumerate(raw_levels):
        try:
            lv = LevelInfo(
                level=int(entry["level"]),
                width=int(entry["width"]),
                height=int(entry["height"]),
                downsample=float(entry["downsample"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SlideFormatError(f"bad level entry {i}: {exc}") from exc
        if lv.level != i:
            raise SlideFormatError(f"level indices must be 0..n-1 in order, got {lv.level} at {i}")
        if lv.width <= 0 or lv.height <= 0:
            raise SlideFormatError(f"level {i} has nonpositive dimensions")
        levels.append(lv)

    if levels[0].downsample != 1.0:
        raise SlideFormatError("level 0 must have downsample 1.0")
    for prev, cur in zip(levels, levels[1:]):
        if cur.downsample <= prev.downsample:
            raise SlideFormatError("downsample factors must strictly increase with level")

    tile_dir = manifest_path.parent
    for lv in levels:
        rows, cols = tile_grid(lv.width, lv.height, tile_size)
        for r in range(rows):
            for c in range(cols):
                path = tile_dir / tile_name(lv.level, r, c)
                if not path.is_file():
                    raise SlideFormatError(f"missing tile {path.name}")
                tw, th, ch = read_pnm_size(path)
                want_w = min(tile_size, lv.width - c * tile_size)
                want_h = min(tile_size, lv.height - r * tile_size)
                if (tw, th, ch) != (want_w, want_h, 3):
                    raise SlideFormatError(
                        f"tile {path.name}: got {tw}x{th}x{ch}, expected {want_w}x{want_h}x3"
                    )

    return SlidePyramid(
        slide_id=slide_id,
        levels=tuple(levels),
        mpp_x=mpp_x,
        mpp_y=mpp_y,
        tile_size=tile_size,
        manifest_path=manifest_path,
    )


def read_region(slide: SlidePyramid, level: int, x: int, y: int, w: int, h: int) -> Pixmap:
    """Read a (w, h) RGB region at (x, y) in level coordinates.

    Pixels falling outside the level are filled with white; in-bounds pixels
    are bit-exact with the underlying tile content. Pure: same arguments give
    identical bytes.
    """
    lv = slide.level_info(level)
    if w <= 0 or h <= 0:
        raise RegionError(f"zero-area region {w}x{h}")

    out = np.full((h, w, 3), BACKGROUND, dtype=np.uint8)
    ix0, iy0 = max(x, 0), max(y, 0)
    ix1, iy1 = min(x + w, lv.width), min(y + h, lv.height)
    if ix0 >= ix1 or iy0 >= iy1:
        return Pixmap(out)

    ts = slide.tile_size
    for row in range(iy0 // ts, (iy1 - 1) // ts + 1):
        for col in range(ix0 // ts, (ix1 - 1) // ts + 1):
            tile = read_pnm(slide.tile_dir / tile_name(level, row, col))
            tx0, ty0 = col * ts, row * ts
            sx0, sy0 = max(ix0 - tx0, 0), max(iy0 - ty0, 0)
            sx1 = min(ix1 - tx0, tile.shape[1])
            sy1 = min(iy1 - ty0, tile.shape[0])
            out[ty0 + sy0 - y : ty0 + sy1 - y, tx0 + sx0 - x : tx0 + sx1 - x] = tile[
                sy0:sy1, sx0:sx1
            ]
    return Pixmap(out)


def read_full_level(slide: SlidePyramid, level: int) -> Pixmap:
    lv = slide.level_info(level)
    return read_region(slide, level, 0, 0, lv.width, lv.height)


@dataclass
class GroundTruth:
    """Planted truth for a synthetic slide, in level-0 pixel coordinates."""

    cells: list[tuple[int, int]] = field(default_factory=list)
    mitoses: list[tuple[int, int]] = field(default_factory=list)
    score_class: int = 1
    score_continuous: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "cells": [[int(x), int(y)] for x, y in self.cells],
            "mitoses": [[int(x), int(y)] for x, y in self.mitoses],
            "score_class": int(self.score_class),
            "score_continuous": float(self.score_continuous),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "GroundTruth":
        return cls(
            cells=[(int(x), int(y)) for x, y in doc["cells"]],
            mitoses=[(int(x), int(y)) for x, y in doc["mitoses"]],
            score_class=int(doc["score_class"]),
            score_continuous=float(doc["score_continuous"]),
        )


def load_ground_truth(path) -> GroundTruth:
    return GroundTruth.from_json_dict(json.loads(Path(path).read_text()))
