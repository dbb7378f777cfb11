"""Tissue segmentation on a slide thumbnail.

Grayscale conversion, Otsu thresholding (tissue = darker than the white
glass background), square binary dilation, 8-connected labeling, and a
minimum blob area filter in mm^2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateHistogramError
from .pnm import write_pnm
from .slide import Pixmap, SlidePyramid, read_full_level
from .synth import downsample_area

DEFAULT_THUMB_MAX_SIDE = 2048
DEFAULT_DILATION_RADIUS = 2
DEFAULT_MIN_BLOB_MM2 = 0.05


@dataclass(frozen=True)
class BinaryMask:
    """Thumbnail-resolution tissue mask tied back to level-0 coordinates."""

    bits: np.ndarray
    level: int
    downsample: float  # level-0 px per mask px

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class TissueBlob:
    label: int
    area_px: int
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 exclusive, mask px
    area_mm2: float


def to_grayscale(pixmap: Pixmap) -> Pixmap:
    """Luminance round(0.299 R + 0.587 G + 0.114 B), rounding half up."""
    if pixmap.channels != 3:
        raise ValueError("to_grayscale needs an RGB pixmap")
    rgb = pixmap.pixels.astype(np.float64)
    lum = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return Pixmap(np.floor(lum + 0.5).astype(np.uint8))


def otsu_threshold(histogram) -> int:
    """Threshold t in [0, 255] maximizing between-class variance.

    Pixels with value < t are the dark (tissue) class. Ties break toward the
    smallest t. A histogram with all mass in one bin has no split and raises.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,) or np.any(hist < 0):
        raise ValueError("histogram must be 256 nonnegative bins")
    total = hist.sum()
    if total <= 0:
        raise ValueError("histogram is empty")
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogramError("all histogram mass in one bin")

    values = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)  # w0[t-1] = mass with value < t
    m0 = np.cumsum(hist * values)

    # candidate thresholds t = 1..255; class0 = [0, t), class1 = [t, 255]
    w_lo = w0[:-1]
    w_hi = total - w_lo
    m_lo = m0[:-1]
    valid = (w_lo > 0) & (w_hi > 0)
    sigma_b = np.full(255, -np.inf)
    mu_lo = np.divide(m_lo, w_lo, out=np.zeros_like(m_lo), where=valid)
    mu_hi = np.divide(m0[-1] - m_lo, w_hi, out=np.zeros_like(m_lo), where=valid)
    sigma_b[valid] = (w_lo * w_hi)[valid] * (mu_lo - mu_hi)[valid] ** 2
    return int(np.argmax(sigma_b)) + 1


def binary_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilate with a (2r+1)-square structuring element (Chebyshev ball)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(mask, structure=structure)


def gray_histogram(gray: Pixmap) -> np.ndarray:
    return np.bincount(gray.pixels.ravel(), minlength=256)[:256]


def extract_tissue_blobs(
    slide: SlidePyramid,
    thumb_max_side: int = DEFAULT_THUMB_MAX_SIDE,
    dilation_radius: int = DEFAULT_DILATION_RADIUS,
    min_blob_mm2: float = DEFAULT_MIN_BLOB_MM2,
) -> tuple[BinaryMask, list[TissueBlob]]:
    """Segment tissue on the coarsest level and return (mask, blobs).

    The coarsest pyramid level is area-averaged further if its max side
    exceeds thumb_max_side. Blobs smaller than min_blob_mm2 are dropped and
    the returned mask keeps only surviving blobs, sorted by area descending.
    """
    level = len(slide.levels) - 1
    info = slide.levels[level]
    thumb = read_full_level(slide, level)
    extra = 1
    max_side = max(info.width, info.height)
    if max_side > thumb_max_side:
        extra = -(-max_side // thumb_max_side)  # ceil div
        thumb = Pixmap(downsample_area(thumb.pixels, extra))
    downsample = info.downsample * extra

    gray = to_grayscale(thumb)
    t = otsu_threshold(gray_histogram(gray))
    tissue = gray.pixels < t
    tissue = binary_dilate(tissue, dilation_radius)

    labels, n = ndimage.label(tissue, structure=np.ones((3, 3), dtype=bool))
    px_area_mm2 = (slide.mpp_x * downsample) * (slide.mpp_y * downsample) / 1e6

    blobs = []
    keep = np.zeros_like(tissue)
    if n:
        slices = ndimage.find_objects(labels)
        for lab, sl in enumerate(slices, start=1):
            area_px = int(np.count_nonzero(labels[sl] == lab))
            area_mm2 = area_px * px_area_mm2
            if area_mm2 < min_blob_mm2:
                continue
            y_sl, x_sl = sl
            blobs.append(
                TissueBlob(
                    label=lab,
                    area_px=area_px,
                    bbox=(x_sl.start, y_sl.start, x_sl.stop, y_sl.stop),
                    area_mm2=area_mm2,
                )
            )
            keep[sl] |= labels[sl] == lab
        blobs.sort(key=lambda b: (-b.area_px, b.label))

    return BinaryMask(bits=keep, level=level, downsample=downsample), blobs


def save_mask(mask: BinaryMask, path) -> None:
    """Export as P5, tissue = 255."""
    write_pnm(path, np.where(mask.bits, 255, 0).astype(np.uint8))


def blobs_to_json(mask: BinaryMask, blobs: list[TissueBlob]) -> str:
    doc = {
        "level": mask.level,
        "downsample": mask.downsample,
        "width": mask.width,
        "height": mask.height,
        "blobs": [
            {
                "label": b.label,
                "area_px": b.area_px,
                "bbox": list(b.bbox),
                "area_mm2": b.area_mm2,
            }
            for b in blobs
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)
