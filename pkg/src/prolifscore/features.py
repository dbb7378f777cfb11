"""Slide-level feature encoding over the ranked ROI list.

Each slide becomes a 21-component vector of statistics over the per-ROI
mitosis and cell counts: global avg/max/min/std, mitotic-grade encodings of
the averages, mitosis/cell ratios, and the same statistics restricted to the
top-10% and 30-70% rank bands of the cell-count ordering. Std is the
population standard deviation, and ratios are defined as 0 whenever the
denominator is 0.

The mitotic-count grade thresholds (<=7 grade 1, <=14 grade 2, else 3 per
10 HPF) are the conventional defaults; they are NOT taken from any dataset
and are the most consequential configurable constant in the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_BR_THRESHOLDS = (7.0, 14.0)

FEATURE_NAMES = (
    "avg_mts", "max_mts", "std_mts", "br_avg_mts", "br_max_mts",
    "avg_cells", "max_cells", "std_cells", "ratio_avg", "ratio_max",
    "avg_mts_top10", "min_mts", "min_cells", "ratio_min", "std_mts_top10",
    "std_cells_top10", "min_mts_top10", "min_cells_top10",
    "avg_mts_mid", "max_mts_mid", "std_mts_mid",
)

# Subsets selected for each score in the source experiments.
MITOSIS_SCORE_FEATURES = (0, 1, 2, 3, 4, 5, 6, 7, 10, 15, 18, 20)
MOLECULAR_SCORE_FEATURES = (0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 14, 18, 20)


def br_grade(count: float, t1: float = DEFAULT_BR_THRESHOLDS[0],
             t2: float = DEFAULT_BR_THRESHOLDS[1]) -> int:
    """Grade a mitotic count per 10 HPF into {1, 2, 3}.

    Grade 1 iff count <= t1, grade 2 iff t1 < count <= t2, else 3.
    Monotone nondecreasing in count.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if not t1 < t2:
        raise ValueError(f"thresholds must satisfy t1 < t2 (got {t1}, {t2})")
    if count <= t1:
        return 1
    if count <= t2:
        return 2
    return 3


def rank_bands(k: int) -> tuple[range, range]:
    """1-based rank ranges (top-10%, 30-70%) for a K-entry ROI list.

    For K=30 this is ranks 1-3 and 9-21. Degenerate K clamps into [1, K].
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    top_hi = max(math.ceil(0.1 * k), 1)
    mid_lo = min(max(math.floor(0.3 * k), 1), k)
    mid_hi = min(max(math.ceil(0.7 * k), 1), k)
    return range(1, top_hi + 1), range(mid_lo, mid_hi + 1)


def _ratio(num: float, den: float) -> float:
    return num / den if den != 0 else 0.0


def _stats(values: np.ndarray) -> tuple[float, float, float, float]:
    """(avg, max, min, population std)."""
    return (
        float(values.mean()),
        float(values.max()),
        float(values.min()),
        float(values.std()),
    )


def extract_features(
    mitosis_counts,
    cell_counts,
    br_thresholds: tuple[float, float] = DEFAULT_BR_THRESHOLDS,
) -> np.ndarray:
    """Encode the per-ROI counts of one slide into the 21-feature vector.

    Inputs must be parallel sequences ordered by the ROI ranking (densest
    first); they are re-sorted defensively by cell count descending with
    stable original order on ties, making the result order-invariant.
    """
    mts = np.asarray(mitosis_counts, dtype=np.float64)
    cells = np.asarray(cell_counts, dtype=np.float64)
    if mts.size == 0 or mts.shape != cells.shape:
        raise ValueError("need equal-length nonempty mitosis and cell count lists")
    if np.any(mts < 0) or np.any(cells < 0):
        raise ValueError("counts must be >= 0")

    order = np.argsort(-cells, kind="stable")
    mts, cells = mts[order], cells[order]

    k = mts.size
    top, mid = rank_bands(k)
    top_idx = np.arange(top.start - 1, top.stop - 1)
    mid_idx = np.arange(mid.start - 1, mid.stop - 1)

    avg_m, max_m, min_m, std_m = _stats(mts)
    avg_c, max_c, min_c, std_c = _stats(cells)
    avg_mt, _, min_mt, std_mt = _stats(mts[top_idx])
    _, _, min_ct, std_ct = _stats(cells[top_idx])
    avg_mm, max_mm, _, std_mm = _stats(mts[mid_idx])

    t1, t2 = br_thresholds
    f = np.array(
        [
            avg_m,
            max_m,
            std_m,
            br_grade(avg_m, t1, t2),
            br_grade(max_m, t1, t2),
            avg_c,
            max_c,
            std_c,
            _ratio(avg_m, avg_c),
            _ratio(max_m, max_c),
            avg_mt,
            min_m,
            min_c,
            _ratio(min_m, min_c),
            std_mt,
            std_ct,
            min_mt,
            min_ct,
            avg_mm,
            max_mm,
            std_mm,
        ],
        dtype=np.float64,
    )
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite feature value")
    return f


def select_features(vector: np.ndarray, indices) -> np.ndarray:
    """Project a 21-feature vector onto the given index subset, in order."""
    indices = list(indices)
    if not indices:
        raise ValueError("empty selection")
    if len(set(indices)) != len(indices):
        raise ValueError("duplicate feature indices")
    vector = np.asarray(vector, dtype=np.float64)
    for i in indices:
        if not 0 <= i < vector.shape[-1]:
            raise ValueError(f"feature index {i} out of range")
    return vector[..., indices]


@dataclass(frozen=True)
class SlideFeatures:
    """One slide's feature vector plus identifiers, as written to CSV."""

    slide_id: str
    vector: np.ndarray

    def csv_row(self) -> str:
        return ",".join([self.slide_id] + [repr(float(v)) for v in self.vector])


FEATURE_CSV_HEADER = "slide," + ",".join(f"f{i}" for i in range(21))


def write_features_csv(path, rows: list[SlideFeatures]) -> None:
    lines = [FEATURE_CSV_HEADER] + [r.csv_row() for r in rows]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_features_csv(path) -> list[SlideFeatures]:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != FEATURE_CSV_HEADER:
        raise ValueError("bad feature CSV header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        out.append(SlideFeatures(parts[0], np.array([float(v) for v in parts[1:]])))
    return out
