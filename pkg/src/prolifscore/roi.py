"""Cell counting per patch and ROI selection by cell density.

The counter works on the hematoxylin concentration channel: Otsu on its
256-bin quantization, a radius-1 opening, 8-connected components filtered by
area, and distance-transform peak counting to split merged nuclei. Patches
are then ranked by count and the densest K become the ROIs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import DegenerateHistogramError, StainEstimationError
from .patches import PatchRef
from .slide import Pixmap
from .stain import (
    compute_concentrations,
    default_he_matrix,
    estimate_stain_matrix,
    rgb_to_od,
)
from .tissue import otsu_threshold

DEFAULT_K = 30
REFERENCE_MPP = 0.25
MAX_ESTIMATION_PIXELS = 65536


@dataclass(frozen=True)
class CellCountParams:
    """Morphology parameters, expressed at 0.25 um/px and scaled by mpp.

    Areas scale by (0.25/mpp)^2 and the split radius by 0.25/mpp.
    """

    mpp: float = REFERENCE_MPP
    min_area_ref: float = 40.0
    max_area_ref: float = 2000.0
    split_radius_ref: float = 16.0
    alpha: float = 1.0
    beta: float = 0.15
    i0: float = 255.0

    @property
    def scale(self) -> float:
        return REFERENCE_MPP / self.mpp

    @property
    def min_area(self) -> float:
        return self.min_area_ref * self.scale**2

    @property
    def max_area(self) -> float:
        return self.max_area_ref * self.scale**2

    @property
    def split_radius(self) -> float:
        return self.split_radius_ref * self.scale


@dataclass(frozen=True)
class CellCountResult:
    patch_index: int
    count: int
    centroids: tuple[tuple[float, float], ...]


def hematoxylin_channel(patch: Pixmap, params: CellCountParams) -> np.ndarray:
    """Per-pixel hematoxylin concentration (float64, shape h x w).

    The stain basis is estimated from a strided subsample of the patch; a
    degenerate estimate falls back to the packaged default H&E basis.
    """
    od = rgb_to_od(patch, params.i0)
    sample = od
    if od.shape[0] > MAX_ESTIMATION_PIXELS:
        step = od.shape[0] // MAX_ESTIMATION_PIXELS + 1
        sample = od[::step]
    try:
        stains = estimate_stain_matrix(sample, alpha=params.alpha, beta=params.beta)
    except StainEstimationError:
        stains = default_he_matrix()
    conc = compute_concentrations(od, stains)
    return conc[:, 0].reshape(patch.height, patch.width)


def _count_peaks(component: np.ndarray, min_separation: float) -> tuple[int, list[tuple[float, float]]]:
    """Split an oversized component by distance-transform local maxima."""
    dist = ndimage.distance_transform_edt(component)
    size = max(int(round(min_separation)) | 1, 3)
    peaks = (dist == ndimage.maximum_filter(dist, size=size)) & (dist > 0)
    labels, n = ndimage.label(peaks, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return 1, [tuple(reversed(ndimage.center_of_mass(component)))]
    centers = ndimage.center_of_mass(peaks, labels, range(1, n + 1))
    return n, [(cy_cx[1], cy_cx[0]) for cy_cx in centers]


def count_cells(patch: Pixmap, params: CellCountParams) -> CellCountResult:
    return count_cells_indexed(patch, params, patch_index=0)


def count_cells_indexed(patch: Pixmap, params: CellCountParams, patch_index: int) -> CellCountResult:
    """Count nuclei in one RGB patch; never fatal on degenerate content."""
    if patch.channels != 3:
        raise ValueError("count_cells needs an RGB patch")
    h_chan = hematoxylin_channel(patch, params)
    h_max = float(h_chan.max())
    if h_max <= 0:
        return CellCountResult(patch_index, 0, ())
    q = np.clip((h_chan / h_max) * 255.0, 0, 255).astype(np.uint8)
    try:
        t = otsu_threshold(np.bincount(q.ravel(), minlength=256)[:256])
    except DegenerateHistogramError:
        return CellCountResult(patch_index, 0, ())
    nuclei = q >= t  # high concentration = nuclei

    nuclei = ndimage.binary_opening(nuclei, structure=np.ones((3, 3), dtype=bool))
    labels, n = ndimage.label(nuclei, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return CellCountResult(patch_index, 0, ())

    count = 0
    centroids: list[tuple[float, float]] = []
    slices = ndimage.find_objects(labels)
    for lab, sl in enumerate(slices, start=1):
        comp = labels[sl] == lab
        area = int(np.count_nonzero(comp))
        if area < params.min_area:
            continue
        if area <= params.max_area:
            count += 1
            cy, cx = ndimage.center_of_mass(comp)
            centroids.append((float(cx + sl[1].start), float(cy + sl[0].start)))
        else:
            k, centers = _count_peaks(comp, params.split_radius)
            count += k
            centroids.extend((float(cx + sl[1].start), float(cy + sl[0].start)) for cx, cy in centers)
    return CellCountResult(patch_index, count, tuple(centroids))


@dataclass(frozen=True)
class RoiEntry:
    patch: PatchRef
    cell_count: int
    mitosis_count: int | None = None


@dataclass(frozen=True)
class SortedRoiList:
    """Top-K patches by cell count, densest first (rank 1 = index 0)."""

    slide_id: str
    k: int
    entries: tuple[RoiEntry, ...] = field(default_factory=tuple)

    def cell_counts(self) -> list[int]:
        return [e.cell_count for e in self.entries]

    def mitosis_counts(self) -> list[int]:
        if any(e.mitosis_count is None for e in self.entries):
            raise ValueError("mitosis counts not filled yet")
        return [e.mitosis_count for e in self.entries]

    def with_mitosis_counts(self, counts) -> "SortedRoiList":
        if len(counts) != len(self.entries):
            raise ValueError("count/entry length mismatch")
        entries = tuple(
            replace(e, mitosis_count=int(c)) for e, c in zip(self.entries, counts)
        )
        return replace(self, entries=entries)

    def to_json_dict(self) -> dict:
        return {
            "slide": self.slide_id,
            "K": self.k,
            "rois": [
                {
                    **e.patch.to_json_dict(),
                    "cells": e.cell_count,
                    **({"mitoses": e.mitosis_count} if e.mitosis_count is not None else {}),
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SortedRoiList":
        entries = tuple(
            RoiEntry(
                patch=PatchRef.from_json_dict(r),
                cell_count=int(r["cells"]),
                mitosis_count=int(r["mitoses"]) if "mitoses" in r else None,
            )
            for r in doc["rois"]
        )
        return cls(slide_id=doc["slide"], k=int(doc["K"]), entries=entries)


def rank_rois(
    counts: list[CellCountResult],
    patches: list[PatchRef],
    k: int = DEFAULT_K,
    slide_id: str | None = None,
) -> SortedRoiList:
    """Select the top-k densest patches; ties break by patch index ascending."""
    if not counts:
        raise ValueError("no cell counts to rank")
    if k < 1:
        raise ValueError("k must be >= 1")
    by_index = {p.index: p for p in patches}
    ordered = sorted(counts, key=lambda c: (-c.count, c.patch_index))[:k]
    entries = tuple(
        RoiEntry(patch=by_index[c.patch_index], cell_count=c.count) for c in ordered
    )
    if slide_id is None:
        slide_id = entries[0].patch.slide_id if entries else "unknown"
    return SortedRoiList(slide_id=slide_id, k=k, entries=entries)


def roi_list_to_json(rois: SortedRoiList) -> str:
    return json.dumps(rois.to_json_dict(), indent=2, sort_keys=True)
