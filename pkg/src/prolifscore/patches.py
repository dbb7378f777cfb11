"""Candidate patch sampling: a grid of 10-HPF squares over tissue blobs.

A 10-consecutive-HPF region is modeled as a square of ~2 mm^2, so the side
in level-0 pixels is sqrt(2e6 um^2) / mpp. Centers are sampled on a regular
grid over each blob's bounding box; patches clipped by the slide border are
discarded, and a patch is kept only if enough of its square lies on tissue.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .tissue import BinaryMask, TissueBlob

DEFAULT_HPF_AREA_MM2 = 2.0
DEFAULT_MIN_TISSUE_FRACTION = 0.25
DEFAULT_STRIDE_FRACTION = 0.5


@dataclass(frozen=True)
class PatchRef:
    slide_id: str
    index: int
    cx: int
    cy: int
    side: int

    def to_json_dict(self) -> dict:
        return {
            "slide": self.slide_id,
            "index": self.index,
            "cx": self.cx,
            "cy": self.cy,
            "side": self.side,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PatchRef":
        return cls(
            slide_id=doc["slide"],
            index=int(doc["index"]),
            cx=int(doc["cx"]),
            cy=int(doc["cy"]),
            side=int(doc["side"]),
        )


def hpf_patch_side(mpp: float, area_mm2: float = DEFAULT_HPF_AREA_MM2) -> int:
    """Side in level-0 px of a square covering `area_mm2` at `mpp` um/px."""
    if mpp <= 0:
        raise ValueError("mpp must be > 0")
    side = round(math.sqrt(area_mm2 * 1e6) / mpp)
    if side <= 0:
        raise ValueError(f"degenerate patch side {side} (area {area_mm2} mm^2 at {mpp} um/px)")
    return side


def _mask_coverage(bits: np.ndarray, downsample: float, x0: int, y0: int, side: int) -> float:
    """Fraction of a level-0 square covered by the (coarser) tissue mask."""
    mx0 = int(math.floor(x0 / downsample))
    my0 = int(math.floor(y0 / downsample))
    mx1 = int(math.ceil((x0 + side) / downsample))
    my1 = int(math.ceil((y0 + side) / downsample))
    mx0, my0 = max(mx0, 0), max(my0, 0)
    mx1, my1 = min(mx1, bits.shape[1]), min(my1, bits.shape[0])
    total = (mx1 - mx0) * (my1 - my0)
    if total <= 0:
        return 0.0
    return float(np.count_nonzero(bits[my0:my1, mx0:mx1])) / total


def sample_patch_centers(
    mask: BinaryMask,
    blobs: list[TissueBlob],
    slide_id: str,
    slide_width: int,
    slide_height: int,
    side: int,
    stride: int,
    min_tissue_fraction: float = DEFAULT_MIN_TISSUE_FRACTION,
) -> list[PatchRef]:
    """Grid-sample patch centers over each blob's bounding box.

    Deterministic order: blobs as given (area-sorted by the segmenter), rows
    then columns within a blob. An empty mask yields an empty list.
    """
    if stride <= 0:
        raise ValueError("stride must be > 0")
    if side <= 0:
        raise ValueError("side must be > 0")
    ds = mask.downsample
    refs: list[PatchRef] = []
    index = 0
    for blob in blobs:
        bx0, by0, bx1, by1 = blob.bbox
        # blob bbox in level-0 px
        x_lo, y_lo = int(bx0 * ds), int(by0 * ds)
        x_hi, y_hi = int(math.ceil(bx1 * ds)), int(math.ceil(by1 * ds))
        y = y_lo
        while y < y_hi and y + side <= slide_height:
            x = x_lo
            while x < x_hi and x + side <= slide_width:
                if _mask_coverage(mask.bits, ds, x, y, side) >= min_tissue_fraction:
                    refs.append(
                        PatchRef(
                            slide_id=slide_id,
                            index=index,
                            cx=x + side // 2,
                            cy=y + side // 2,
                            side=side,
                        )
                    )
                    index += 1
                x += stride
            y += stride
    return refs


def patches_to_jsonl(refs: list[PatchRef]) -> str:
    return "\n".join(json.dumps(r.to_json_dict(), sort_keys=True) for r in refs) + ("\n" if refs else "")


def patches_from_jsonl(text: str) -> list[PatchRef]:
    return [PatchRef.from_json_dict(json.loads(ln)) for ln in text.splitlines() if ln.strip()]
