"""Stain estimation and normalization for H&E patches.

Estimation follows the eigen-plane / robust-angle-percentile recipe with
alpha=1.0 and beta=0.15: transmitted intensities go to optical density,
near-transparent pixels are dropped, the OD cloud is projected onto its top
two principal directions, and the 1st/99th percentile angles of that
projection give the two stain vectors. Concentrations come from a per-pixel
least-squares inversion of the stain matrix, and normalization rescales them
to a target profile's 99th-percentile reference concentrations before
reconstructing through Beer-Lambert (base 10).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DegenerateStainError, TooFewStainPixelsError
from .slide import Pixmap

DEFAULT_I0 = 255.0
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.15
MIN_STAIN_PIXELS = 100
MIN_COLUMN_ANGLE_DEG = 1.0
REFERENCE_PERCENTILE = 99.0


@dataclass(frozen=True)
class StainMatrix:
    """Two unit OD-space stain vectors, hematoxylin column first.

    ``matrix`` has shape (3, 2): rows are RGB channels, columns are stains.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 2):
            raise ValueError(f"stain matrix must be 3x2, got {m.shape}")
        norms = np.linalg.norm(m, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError(f"stain columns must be unit vectors (norms {norms})")
        if np.any(m < -1e-9):
            raise ValueError("stain components must be nonnegative")
        if column_angle_deg(m) < MIN_COLUMN_ANGLE_DEG:
            raise ValueError("stain columns are (near) parallel")
        object.__setattr__(self, "matrix", m)

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.matrix[:, 0]

    @property
    def eosin(self) -> np.ndarray:
        return self.matrix[:, 1]


@dataclass(frozen=True)
class StainProfile:
    """Normalization target: stain basis plus reference max-concentrations."""

    stains: StainMatrix
    c99: tuple[float, float]
    i0: float = DEFAULT_I0

    def __post_init__(self):
        if self.c99[0] <= 0 or self.c99[1] <= 0:
            raise ValueError("reference concentrations must be > 0")
        if self.i0 <= 0:
            raise ValueError("i0 must be > 0")

    def to_json_dict(self) -> dict:
        return {
            "stain_matrix": [[round(float(v), 12) for v in row] for row in self.stains.matrix],
            "c99": [round(float(self.c99[0]), 12), round(float(self.c99[1]), 12)],
            "i0": self.i0,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "StainProfile":
        return cls(
            stains=StainMatrix(np.array(doc["stain_matrix"], dtype=np.float64)),
            c99=(float(doc["c99"][0]), float(doc["c99"][1])),
            i0=float(doc["i0"]),
        )


def column_angle_deg(matrix: np.ndarray) -> float:
    """Angle in degrees between the two stain columns."""
    a, b = matrix[:, 0], matrix[:, 1]
    cosang = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))


def angle_between_deg(u: np.ndarray, v: np.ndarray) -> float:
    cosang = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))


def _normalize_columns(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def _load_packaged_matrix(name: str) -> StainMatrix:
    doc = json.loads(resources.files("prolifscore.data").joinpath(name).read_text())
    return StainMatrix(_normalize_columns(np.array(doc["stain_matrix"], dtype=np.float64)))


def default_he_matrix() -> StainMatrix:
    """Fallback H&E basis used when per-patch estimation degenerates."""
    return _load_packaged_matrix("default_he_stain.json")


def default_target_profile() -> StainProfile:
    """Packaged normalization target (estimated from the reference patch)."""
    doc = json.loads(
        resources.files("prolifscore.data").joinpath("target_stain_profile.json").read_text()
    )
    return StainProfile.from_json_dict(doc)


def rgb_to_od(pixmap: Pixmap | np.ndarray, i0: float = DEFAULT_I0) -> np.ndarray:
    """Per-pixel optical density, OD_c = -log10(max(I_c, 1) / i0).

    Returns an (n, 3) float64 array of flattened pixels.
    """
    if i0 <= 0:
        raise ValueError("i0 must be > 0")
    pixels = pixmap.pixels if isinstance(pixmap, Pixmap) else np.asarray(pixmap)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("rgb_to_od needs an RGB image")
    flat = pixels.reshape(-1, 3).astype(np.float64)
    return -np.log10(np.maximum(flat, 1.0) / i0)


def estimate_stain_matrix(
    od: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
) -> StainMatrix:
    """Estimate the two stain vectors from an (n, 3) OD cloud.

    Steps: drop pixels with ||OD|| < beta; take the top-2 eigenvectors of the
    3x3 OD covariance; project; find the alpha / (100 - alpha) percentile
    angles; back-project both extremes; flip signs nonnegative; normalize;
    put hematoxylin (larger blue-channel OD) first.
    """
    od = np.asarray(od, dtype=np.float64)
    if od.ndim != 2 or od.shape[1] != 3:
        raise ValueError("od must be (n, 3)")
    kept = od[np.linalg.norm(od, axis=1) >= beta]
    if kept.shape[0] < MIN_STAIN_PIXELS:
        raise TooFewStainPixelsError(
            f"only {kept.shape[0]} OD pixels above beta={beta} (need {MIN_STAIN_PIXELS})"
        )

    cov = np.cov(kept, rowvar=False)
    eigvals, eigvecs = np.linalg.eigh(cov)
    # eigh returns ascending eigenvalues; plane = two largest
    if eigvals[2] <= 0 or eigvals[1] / eigvals[2] < 1e-4:
        raise DegenerateStainError("OD covariance is rank deficient (single stain?)")
    plane = eigvecs[:, [2, 1]]

    proj = kept @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100.0 - alpha])
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])

    vecs = []
    for v in (v_lo, v_hi):
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise DegenerateStainError("stain direction collapsed to zero after sign fix")
        vecs.append(v / norm)

    if angle_between_deg(vecs[0], vecs[1]) < MIN_COLUMN_ANGLE_DEG:
        raise DegenerateStainError("estimated stain vectors are (near) parallel")

    # hematoxylin has the larger blue-channel OD component
    if vecs[0][2] >= vecs[1][2]:
        h, e = vecs
    else:
        e, h = vecs
    return StainMatrix(np.column_stack([h, e]))


def compute_concentrations(od: np.ndarray, stains: StainMatrix) -> np.ndarray:
    """Per-pixel least-squares stain concentrations, clamped to >= 0.

    ``od`` is (n, 3); the result is (n, 2) with hematoxylin first.
    """
    od = np.asarray(od, dtype=np.float64)
    pinv = np.linalg.pinv(stains.matrix)  # (2, 3)
    return np.clip(od @ pinv.T, 0.0, None)


def estimate_profile(
    pixmap: Pixmap,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    i0: float = DEFAULT_I0,
) -> StainProfile:
    """Estimate a full StainProfile (basis + c99 references) from one patch."""
    od = rgb_to_od(pixmap, i0)
    stains = estimate_stain_matrix(od, alpha=alpha, beta=beta)
    conc = compute_concentrations(od, stains)
    c99 = np.percentile(conc, REFERENCE_PERCENTILE, axis=0)
    c99 = np.maximum(c99, 1e-6)
    return StainProfile(stains=stains, c99=(float(c99[0]), float(c99[1])), i0=i0)


def reconstruct_rgb(conc: np.ndarray, stains: StainMatrix, shape, i0: float = DEFAULT_I0) -> Pixmap:
    """Beer-Lambert reconstruction I = i0 * 10^-(S @ C), rounded into uint8."""
    od = conc @ stains.matrix.T
    intensities = i0 * np.power(10.0, -od)
    pixels = np.clip(np.rint(intensities), 0, 255).astype(np.uint8)
    return Pixmap(pixels.reshape(shape))


@dataclass(frozen=True)
class NormalizeResult:
    pixmap: Pixmap
    warning: str | None = None


def normalize_patch(
    pixmap: Pixmap,
    target: StainProfile,
    source: StainProfile | None = None,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
) -> NormalizeResult:
    """Map a patch's stain appearance onto the target profile.

    When the source profile is omitted it is estimated from the patch itself.
    A degenerate-stain patch is returned unmodified with a warning so one bad
    patch cannot abort a slide; other estimation errors propagate.
    """
    if source is None:
        try:
            source = estimate_profile(pixmap, alpha=alpha, beta=beta, i0=target.i0)
        except DegenerateStainError as exc:
            return NormalizeResult(pixmap=pixmap, warning=f"degenerate stain: {exc}")
    od = rgb_to_od(pixmap, target.i0)
    conc = compute_concentrations(od, source.stains)
    scale = np.array(
        [target.c99[0] / source.c99[0], target.c99[1] / source.c99[1]], dtype=np.float64
    )
    out = reconstruct_rgb(conc * scale, target.stains, pixmap.pixels.shape, i0=target.i0)
    return NormalizeResult(pixmap=out)


def save_profile(profile: StainProfile, path) -> None:
    Path(path).write_text(json.dumps(profile.to_json_dict(), indent=2, sort_keys=True) + "\n")


def load_profile(path) -> StainProfile:
    return StainProfile.from_json_dict(json.loads(Path(path).read_text()))
