"""Mitosis detection: sliding-window scoring, valid-region geometry, NMS,
and the two-step (hard-negative mining) training procedure.

Detectors score 128x128 windows on a stride-64 grid; each window's
probability depends only on its central 64x64 region, so scoring a whole ROI
patch decomposes exactly into independent per-window evaluations. Every
scoring path funnels through one block-statistics routine, which is what
makes the decomposition bit-exact.

The built-in scorer is classical: hematoxylin-concentration statistics of
the central block (mean, darkness percentile, blob compactness) squashed by
a logistic. The same feature vector backs a trainable logistic-regression
learner used to exercise the two-step procedure, and a subprocess seam lets
an external detector replace both.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError, RegionError
from .pnm import encode_pnm
from .slide import Pixmap
from .stain import default_he_matrix

TRAIN_INPUT = 128
VALID_CENTER = 64
OUTPUT_STRIDE = 64

DEFAULT_DETECTION_THRESHOLD = 0.5
DEFAULT_NMS_RADIUS = 16.0
DEFAULT_MATCH_RADIUS = 30.0

# central-block feature constants (frozen; see tools/calibrate_detector.py)
BLOB_H_THRESHOLD = 0.30
DARKNESS_PERCENTILE = 99.0
MIN_BLOB_AREA_PX = 8
REFERENCE_WEIGHTS = (-6.5, 1.5, 5.0, 0.8)  # bias, mean, percentile, compactness

LABEL_MITOSIS = "mitosis"
LABEL_NORMAL = "normal"
PROV_GROUND_TRUTH = "ground_truth"
PROV_RANDOM_NORMAL = "random_normal"
PROV_MINED_FP = "mined_false_positive"
_LABEL_FOR_PROV = {
    PROV_GROUND_TRUTH: LABEL_MITOSIS,
    PROV_RANDOM_NORMAL: LABEL_NORMAL,
    PROV_MINED_FP: LABEL_NORMAL,
}


@dataclass(frozen=True)
class DetectorGeometry:
    train_input: int = TRAIN_INPUT
    valid_center: int = VALID_CENTER
    stride: int = OUTPUT_STRIDE
    receptive_field: int = TRAIN_INPUT

    def __post_init__(self):
        if not 0 < self.valid_center <= self.train_input:
            raise ValueError("valid_center must be in (0, train_input]")
        if self.stride <= 0 or (self.train_input - self.valid_center) % self.stride:
            raise ValueError("stride must divide train_input - valid_center")
        if self.receptive_field < self.stride:
            raise ValueError("receptive field must be >= stride")


@dataclass(frozen=True)
class ScoreMap:
    """Probability grid over window positions, plus its coordinate mapping.

    Cell (i, j) maps to the input-pixel window center
    (ox + j * stride, oy + i * stride); `valid` marks cells whose full
    train_input window lies inside the patch.
    """

    probs: np.ndarray
    valid: np.ndarray
    ox: int
    oy: int
    stride: int

    def __post_init__(self):
        if self.probs.shape != self.valid.shape:
            raise ValueError("probs/valid shape mismatch")
        if self.probs.size and (self.probs.min() < 0.0 or self.probs.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def rows(self) -> int:
        return self.probs.shape[0]

    @property
    def cols(self) -> int:
        return self.probs.shape[1]

    def cell_center(self, i: int, j: int) -> tuple[int, int]:
        return self.ox + j * self.stride, self.oy + i * self.stride

    def to_json_dict(self) -> dict:
        return {
            "ox": self.ox,
            "oy": self.oy,
            "stride": self.stride,
            "rows": self.rows,
            "cols": self.cols,
            "probs": [float(p) for p in self.probs.ravel()],
            "valid": [int(v) for v in self.valid.ravel()],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ScoreMap":
        rows, cols = int(doc["rows"]), int(doc["cols"])
        probs = np.array(doc["probs"], dtype=np.float64).reshape(rows, cols)
        valid = np.array(doc["valid"], dtype=bool).reshape(rows, cols)
        return cls(probs=probs, valid=valid, ox=int(doc["ox"]), oy=int(doc["oy"]),
                   stride=int(doc["stride"]))


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    probability: float


def lview_valid_mask(geometry: DetectorGeometry, patch_w: int, patch_h: int):
    """Valid-cell mask and coordinate origin for a patch size.

    Cell (i, j) is valid iff its train_input-sized window fits entirely
    inside the patch. Returns (valid bool (rows, cols), ox, oy, stride).
    """
    t, s = geometry.train_input, geometry.stride
    cols = (patch_w - t) // s + 1 if patch_w >= t else 0
    rows = (patch_h - t) // s + 1 if patch_h >= t else 0
    valid = np.ones((max(rows, 0), max(cols, 0)), dtype=bool)
    return valid, t // 2, t // 2, s


def _h_pinv_row() -> tuple[float, float, float]:
    pinv = np.linalg.pinv(default_he_matrix().matrix)
    return float(pinv[0, 0]), float(pinv[0, 1]), float(pinv[0, 2])


_H_PINV = _h_pinv_row()
_XG = np.tile(np.arange(VALID_CENTER, dtype=np.float64), VALID_CENTER)
_YG = np.repeat(np.arange(VALID_CENTER, dtype=np.float64), VALID_CENTER)


def hematoxylin_map(pixels: np.ndarray, i0: float = 255.0) -> np.ndarray:
    """Per-pixel hematoxylin concentration under the fixed default basis.

    Strictly elementwise so any crop of the input yields the identical crop
    of the output (the root of the exact window decomposition).
    """
    rgb = pixels.astype(np.float64)
    od_r = -np.log10(np.maximum(rgb[..., 0], 1.0) / i0)
    od_g = -np.log10(np.maximum(rgb[..., 1], 1.0) / i0)
    od_b = -np.log10(np.maximum(rgb[..., 2], 1.0) / i0)
    p0, p1, p2 = _H_PINV
    return np.maximum(p0 * od_r + p1 * od_g + p2 * od_b, 0.0)


def block_features(blocks: np.ndarray) -> np.ndarray:
    """Feature vectors for a stack of central blocks.

    blocks: float64 C-contiguous (n, 64, 64) hematoxylin concentrations.
    Returns (n, 3): mean, darkness percentile, blob compactness. Every
    reduction is row-independent, so results do not depend on n.
    """
    n = blocks.shape[0]
    flat = np.ascontiguousarray(blocks).reshape(n, -1)
    mean = flat.mean(axis=1)
    dark = np.percentile(flat, DARKNESS_PERCENTILE, axis=1)

    mask = flat > BLOB_H_THRESHOLD
    area = mask.sum(axis=1).astype(np.float64)
    safe = np.maximum(area, 1.0)
    sx = np.where(mask, _XG, 0.0).sum(axis=1)
    sy = np.where(mask, _YG, 0.0).sum(axis=1)
    sxx = np.where(mask, _XG * _XG, 0.0).sum(axis=1)
    syy = np.where(mask, _YG * _YG, 0.0).sum(axis=1)
    sxy = np.where(mask, _XG * _YG, 0.0).sum(axis=1)
    mx, my = sx / safe, sy / safe
    var_x = sxx / safe - mx * mx
    var_y = syy / safe - my * my
    cov = sxy / safe - mx * my
    det = np.maximum(var_x * var_y - cov * cov, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        compact = area / (4.0 * np.pi * np.sqrt(det))
    compact = np.where((area >= MIN_BLOB_AREA_PX) & (det > 1e-9), compact, 0.0)
    compact = np.minimum(compact, 2.0)
    return np.column_stack([mean, dark, compact])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _score_features(feats: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # elementwise (no matmul) so the result per row is independent of n
    z = weights[0] + weights[1] * feats[:, 0] + weights[2] * feats[:, 1] + weights[3] * feats[:, 2]
    return _sigmoid(z)


def extract_central_blocks(h_map: np.ndarray, geometry: DetectorGeometry,
                           cells: list[tuple[int, int]]) -> np.ndarray:
    """Copy the central valid_center blocks for the given (i, j) cells."""
    t, v, s = geometry.train_input, geometry.valid_center, geometry.stride
    off = (t - v) // 2
    out = np.empty((len(cells), v, v), dtype=np.float64)
    for k, (i, j) in enumerate(cells):
        y0, x0 = i * s + off, j * s + off
        out[k] = h_map[y0 : y0 + v, x0 : x0 + v]
    return out


class WindowScorer:
    """Detector over central-block features with fixed logistic weights.

    Immutable after construction; safe for concurrent use.
    """

    def __init__(self, weights=REFERENCE_WEIGHTS, geometry: DetectorGeometry | None = None,
                 name: str = "reference"):
        self.weights = np.asarray(weights, dtype=np.float64).copy()
        if self.weights.shape != (4,):
            raise ValueError("weights must be (bias, w_mean, w_dark, w_compact)")
        self.geometry = geometry or DetectorGeometry()
        self.name = name

    def score_map(self, patch: Pixmap) -> ScoreMap:
        g = self.geometry
        if patch.width < g.train_input or patch.height < g.train_input:
            raise RegionError(
                f"patch {patch.width}x{patch.height} smaller than "
                f"train input {g.train_input}"
            )
        if patch.channels != 3:
            raise ValueError("detector needs an RGB patch")
        valid, ox, oy, s = lview_valid_mask(g, patch.width, patch.height)
        h_map = hematoxylin_map(patch.pixels)
        cells = [(i, j) for i in range(valid.shape[0]) for j in range(valid.shape[1])]
        probs = np.zeros(valid.shape, dtype=np.float64)
        # chunked to bound memory on big ROI patches; per-row results are
        # independent of chunk size
        chunk = 2048
        for start in range(0, len(cells), chunk):
            part = cells[start : start + chunk]
            feats = block_features(extract_central_blocks(h_map, g, part))
            vals = _score_features(feats, self.weights)
            for (i, j), p in zip(part, vals):
                probs[i, j] = p
        return ScoreMap(probs=probs, valid=valid, ox=ox, oy=oy, stride=s)

    def window_probability(self, window: Pixmap) -> float:
        """Score one train_input-sized window (its map has a single cell)."""
        g = self.geometry
        if (window.width, window.height) != (g.train_input, g.train_input):
            raise ValueError("window must be exactly train_input sized")
        return float(self.score_map(window).probs[0, 0])


def reference_detector(geometry: DetectorGeometry | None = None) -> WindowScorer:
    """The built-in classical scorer with frozen weights."""
    return WindowScorer(REFERENCE_WEIGHTS, geometry, name="reference")


def score_map(detector, patch: Pixmap) -> ScoreMap:
    """Pluggable-interface entry point: delegate to the detector object."""
    return detector.score_map(patch)


def detect_mitoses(
    smap: ScoreMap,
    threshold: float = DEFAULT_DETECTION_THRESHOLD,
    nms_radius: float = DEFAULT_NMS_RADIUS,
) -> list[Detection]:
    """Greedy NMS over valid cells with probability >= threshold.

    Highest probability first (ties by (y, x)); each kept detection
    suppresses all cells within `nms_radius` (inclusive) of it.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    ii, jj = np.nonzero(smap.valid & (smap.probs >= threshold))
    if ii.size == 0:
        return []
    probs = smap.probs[ii, jj]
    xs = smap.ox + jj.astype(np.int64) * smap.stride
    ys = smap.oy + ii.astype(np.int64) * smap.stride
    order = np.lexsort((xs, ys, -probs))
    xs, ys, probs = xs[order], ys[order], probs[order]

    alive = np.ones(xs.size, dtype=bool)
    picked: list[Detection] = []
    r2 = nms_radius * nms_radius
    for k in range(xs.size):
        if not alive[k]:
            continue
        picked.append(Detection(x=int(xs[k]), y=int(ys[k]), probability=float(probs[k])))
        d2 = (xs - xs[k]) ** 2 + (ys - ys[k]) ** 2
        alive &= d2 > r2
    return picked


@dataclass(frozen=True)
class TrainingSample:
    pixels: np.ndarray  # uint8 (train_input, train_input, 3)
    label: str
    provenance: str

    def __post_init__(self):
        if _LABEL_FOR_PROV.get(self.provenance) != self.label:
            raise ValueError(f"label {self.label!r} inconsistent with provenance {self.provenance!r}")


@dataclass
class TrainingDataset:
    samples: list[TrainingSample] = field(default_factory=list)

    def count(self, label: str) -> int:
        return sum(1 for s in self.samples if s.label == label)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class AnnotatedPatch:
    """A patch with known mitosis centers, for training and mining."""

    patch_id: str
    pixmap: Pixmap
    mitosis_centers: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class FalsePositive:
    patch_id: str
    x: int
    y: int
    probability: float


def _clamped_window_origin(cx: int, cy: int, size: int, w: int, h: int) -> tuple[int, int]:
    x0 = min(max(cx - size // 2, 0), w - size)
    y0 = min(max(cy - size // 2, 0), h - size)
    return x0, y0


def crop_window(pixmap: Pixmap, cx: int, cy: int, size: int = TRAIN_INPUT) -> np.ndarray:
    """Size x size crop centered at (cx, cy), shifted inward at borders."""
    if pixmap.width < size or pixmap.height < size:
        raise ValueError("patch smaller than crop size")
    x0, y0 = _clamped_window_origin(cx, cy, size, pixmap.width, pixmap.height)
    return pixmap.pixels[y0 : y0 + size, x0 : x0 + size].copy()


def build_stage1_dataset(
    patches: list[AnnotatedPatch],
    n_normals: int,
    seed: int,
    match_radius: float = DEFAULT_MATCH_RADIUS,
    geometry: DetectorGeometry | None = None,
) -> TrainingDataset:
    """Initial dataset: one crop per annotated mitosis plus random normals
    sampled at least match_radius away from every mitosis center."""
    g = geometry or DetectorGeometry()
    rng = np.random.default_rng(seed)
    ds = TrainingDataset()
    for patch in patches:
        for cx, cy in patch.mitosis_centers:
            ds.samples.append(
                TrainingSample(crop_window(patch.pixmap, cx, cy, g.train_input),
                               LABEL_MITOSIS, PROV_GROUND_TRUTH)
            )
    half = g.train_input // 2
    r2 = match_radius * match_radius
    attempts = 0
    while sum(1 for s in ds.samples if s.label == LABEL_NORMAL) < n_normals:
        attempts += 1
        if attempts > 200 * max(n_normals, 1):
            raise ModelError("could not place the requested number of normal samples")
        patch = patches[int(rng.integers(len(patches)))]
        if patch.pixmap.width < g.train_input or patch.pixmap.height < g.train_input:
            continue
        cx = int(rng.integers(half, patch.pixmap.width - half + 1))
        cy = int(rng.integers(half, patch.pixmap.height - half + 1))
        if any((cx - mx) ** 2 + (cy - my) ** 2 <= r2 for mx, my in patch.mitosis_centers):
            continue
        ds.samples.append(
            TrainingSample(crop_window(patch.pixmap, cx, cy, g.train_input),
                           LABEL_NORMAL, PROV_RANDOM_NORMAL)
        )
    return ds


def mine_false_positives(
    detector,
    patches: list[AnnotatedPatch],
    threshold: float = DEFAULT_DETECTION_THRESHOLD,
    match_radius: float = DEFAULT_MATCH_RADIUS,
    nms_radius: float = DEFAULT_NMS_RADIUS,
) -> list[FalsePositive]:
    """Detections with no ground-truth center within match_radius (<= rule)."""
    fps: list[FalsePositive] = []
    r2 = match_radius * match_radius
    for patch in patches:
        for det in detect_mitoses(detector.score_map(patch.pixmap), threshold, nms_radius):
            if any((det.x - mx) ** 2 + (det.y - my) ** 2 <= r2
                   for mx, my in patch.mitosis_centers):
                continue
            fps.append(FalsePositive(patch.patch_id, det.x, det.y, det.probability))
    return fps


def build_stage2_dataset(
    stage1: TrainingDataset,
    fps: list[FalsePositive],
    n_new_normals: int,
    patches_by_id: dict[str, AnnotatedPatch],
    aug_translation_max: int = 16,
    seed: int = 0,
    geometry: DetectorGeometry | None = None,
) -> TrainingDataset:
    """Stage-1 samples plus n_new_normals crops around mined false positives.

    FPs are cycled round-robin; each crop gets an independent uniform
    translation in [-aug_translation_max, +aug_translation_max]^2, clamped so
    the window stays inside its patch.
    """
    g = geometry or DetectorGeometry()
    if n_new_normals > 0 and not fps:
        raise ValueError("need mined false positives to add new normals")
    ds = TrainingDataset(samples=list(stage1.samples))
    rng = np.random.default_rng(seed)
    for k in range(n_new_normals):
        fp = fps[k % len(fps)]
        patch = patches_by_id[fp.patch_id]
        dx = int(rng.integers(-aug_translation_max, aug_translation_max + 1))
        dy = int(rng.integers(-aug_translation_max, aug_translation_max + 1))
        crop = crop_window(patch.pixmap, fp.x + dx, fp.y + dy, g.train_input)
        ds.samples.append(TrainingSample(crop, LABEL_NORMAL, PROV_MINED_FP))
    return ds


def sample_features(samples: list[TrainingSample], geometry: DetectorGeometry) -> np.ndarray:
    """Central-block feature matrix for training samples, shape (n, 3)."""
    g = geometry
    feats = np.empty((len(samples), 3), dtype=np.float64)
    for k, s in enumerate(samples):
        h_map = hematoxylin_map(s.pixels)
        blocks = extract_central_blocks(h_map, g, [(0, 0)])
        feats[k] = block_features(blocks)[0]
    return feats


L2_PENALTY = 1e-4
GRAD_TOL = 1e-6
MAX_EPOCHS = 10_000


def logistic_loss_grad(weights: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy with L2 on non-bias weights; returns (loss, grad)."""
    xt = np.column_stack([np.ones(x.shape[0]), x])
    z = xt @ weights
    p = _sigmoid(z)
    eps = 1e-12
    loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
    loss += 0.5 * L2_PENALTY * float(weights[1:] @ weights[1:])
    grad = xt.T @ (p - y) / x.shape[0]
    grad[1:] += L2_PENALTY * weights[1:]
    return loss, grad


def train_reference_learner(
    dataset: TrainingDataset,
    geometry: DetectorGeometry | None = None,
) -> WindowScorer:
    """Fit logistic weights on the reference features by plain gradient
    descent from zero init; deterministic given dataset order."""
    g = geometry or DetectorGeometry()
    labels = np.array([1.0 if s.label == LABEL_MITOSIS else 0.0 for s in dataset.samples])
    if labels.size == 0 or labels.min() == labels.max():
        raise ModelError("training dataset must contain both classes")
    x = sample_features(dataset.samples, g)
    return WindowScorer(fit_logistic(x, labels), g, name="learned")


def fit_logistic(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient descent to ||grad|| < 1e-6 or 10^4 epochs; zeros init."""
    xt_norms = 1.0 + np.sum(x * x, axis=1)
    lipschitz = 0.25 * float(xt_norms.max()) + L2_PENALTY
    step = 1.0 / lipschitz
    w = np.zeros(x.shape[1] + 1, dtype=np.float64)
    for _ in range(MAX_EPOCHS):
        _, grad = logistic_loss_grad(w, x, y)
        if float(np.linalg.norm(grad)) < GRAD_TOL:
            break
        w -= step * grad
    return w


class SubprocessDetector:
    """External detector invoked per patch: P6 on stdin, ScoreMap JSON out.

    This is the seam where a real convolutional detector attaches.
    """

    def __init__(self, command: list[str], geometry: DetectorGeometry | None = None):
        self.command = list(command)
        self.geometry = geometry or DetectorGeometry()
        self.name = "subprocess"

    def score_map(self, patch: Pixmap) -> ScoreMap:
        if patch.width < self.geometry.train_input or patch.height < self.geometry.train_input:
            raise RegionError("patch smaller than detector train input")
        proc = subprocess.run(
            self.command,
            input=encode_pnm(patch.pixels),
            stdout=subprocess.PIPE,
            check=True,
        )
        try:
            doc = json.loads(proc.stdout.decode())
            smap = ScoreMap.from_json_dict(doc)
        except (ValueError, KeyError) as exc:
            raise ModelError(f"plug-in detector emitted bad score map: {exc}") from exc
        return smap


def evaluate_detector_f1(
    detector,
    patches: list[AnnotatedPatch],
    threshold: float = DEFAULT_DETECTION_THRESHOLD,
    nms_radius: float = DEFAULT_NMS_RADIUS,
    match_radius: float = DEFAULT_MATCH_RADIUS,
) -> float:
    """Pooled detection F1 over annotated patches (greedy point matching)."""
    from .metrics import MatchResult, f1_scores, match_detections

    total = MatchResult(0, 0, 0, ())
    for patch in patches:
        dets = detect_mitoses(detector.score_map(patch.pixmap), threshold, nms_radius)
        m = match_detections([(d.x, d.y) for d in dets],
                             list(patch.mitosis_centers), match_radius)
        total = MatchResult(
            total.true_positives + m.true_positives,
            total.false_positives + m.false_positives,
            total.false_negatives + m.false_negatives,
            (),
        )
    return f1_scores(total)[2]


def detections_to_jsonl(per_patch: list[tuple[int, list[Detection]]]) -> str:
    lines = [
        json.dumps({"patch_index": idx, "x": d.x, "y": d.y, "p": d.probability}, sort_keys=True)
        for idx, dets in per_patch
        for d in dets
    ]
    return "\n".join(lines) + ("\n" if lines else "")
