"""Challenge metrics: detection F1, quadratic weighted kappa, Spearman.

Point detections are matched to ground truth greedily by ascending pair
distance within a radius; kappa uses squared-distance disagreement weights
over a fixed class set; Spearman is Pearson over average ranks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    pairs: tuple[tuple[int, int], ...]  # (detection idx, truth idx)


def match_detections(detections, truths, radius: float) -> MatchResult:
    """One-to-one greedy matching by ascending distance, capped at radius.

    Distance exactly equal to the radius still matches.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    dets = [(float(x), float(y)) for x, y in detections]
    gts = [(float(x), float(y)) for x, y in truths]
    candidates = []
    r2 = radius * radius
    for i, (dx, dy) in enumerate(dets):
        for j, (tx, ty) in enumerate(gts):
            d2 = (dx - tx) ** 2 + (dy - ty) ** 2
            if d2 <= r2:
                candidates.append((d2, i, j))
    candidates.sort()
    det_used = [False] * len(dets)
    gt_used = [False] * len(gts)
    pairs = []
    for _, i, j in candidates:
        if det_used[i] or gt_used[j]:
            continue
        det_used[i] = True
        gt_used[j] = True
        pairs.append((i, j))
    tp = len(pairs)
    return MatchResult(
        true_positives=tp,
        false_positives=len(dets) - tp,
        false_negatives=len(gts) - tp,
        pairs=tuple(pairs),
    )


def f1_scores(match: MatchResult) -> tuple[float, float, float]:
    """(precision, recall, f1), all zero when their denominators are zero."""
    tp, fp, fn = match.true_positives, match.false_positives, match.false_negatives
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def quadratic_weighted_kappa(preds, labels, n_classes: int = 3) -> float:
    """Cohen's kappa with weights w_ij = (i - j)^2 / (n - 1)^2.

    Values must be integers in 1..n_classes. When the expected-disagreement
    denominator vanishes (both raters constant and equal) the score is 1.0.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1 or preds.size == 0:
        raise ValueError("preds and labels must be equal-length nonempty vectors")
    for v in (preds, labels):
        if v.min() < 1 or v.max() > n_classes:
            raise ValueError(f"values must lie in 1..{n_classes}")

    observed = np.zeros((n_classes, n_classes), dtype=np.float64)
    for p, t in zip(preds, labels):
        observed[p - 1, t - 1] += 1
    observed /= observed.sum()

    idx = np.arange(n_classes, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (n_classes - 1) ** 2
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))

    denom = float((weights * expected).sum())
    numer = float((weights * observed).sum())
    if denom == 0.0:
        if numer == 0.0:
            return 1.0
        raise ValueError("degenerate marginals")
    return 1.0 - numer / denom


def average_ranks(values) -> np.ndarray:
    """1-based ranks; ties get the mean of the rank range they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("x and y must be equal-length vectors of length >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("constant vector has no rank correlation")
    rx, ry = average_ranks(x), average_ranks(y)
    # identical / exactly reversed rankings are +-1 by definition; the
    # shortcut keeps them exact instead of within float rounding
    if np.array_equal(rx, ry):
        return 1.0
    rx -= rx.mean()
    ry -= ry.mean()
    if np.array_equal(rx, -ry):
        return -1.0
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))
