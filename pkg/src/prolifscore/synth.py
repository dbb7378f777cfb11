"""Synthetic slide generator with planted ground truth.

Slides are rendered in stain-concentration space and converted to RGB via
Beer-Lambert with a known stain matrix, so the normalization module can
invert them exactly. Nuclei are Poisson-placed elliptical hematoxylin blobs;
mitotic figures are darker multi-lobed blobs. A fixed seed reproduces the
tile bytes exactly (numpy PCG64 via default_rng).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .features import br_grade
from .slide import GroundTruth, tile_grid, tile_name
from .pnm import write_pnm

DEFAULT_RENDER_MATRIX = (
    (0.65, 0.07),
    (0.704, 0.99),
    (0.286, 0.105),
)

CELL_AMPLITUDE = (0.55, 0.85)
MITOSIS_AMPLITUDE = (1.45, 1.85)
EOSIN_WASH_RANGE = (0.15, 0.50)
EOSIN_TEXTURE_SCALE = 32  # px between texture control points
EOSIN_SUPPRESSION = 2.0  # eosin fades where hematoxylin blobs sit


@dataclass(frozen=True)
class DensityRegion:
    """Rectangular or disc-shaped tissue region with its own densities.

    Geometry is in level-0 pixels: rects use (x0, y0, x1, y1) exclusive of
    x1/y1, discs use (cx, cy, radius). Densities are per mm^2.
    """

    shape: str
    geometry: tuple[float, ...]
    cell_density: float
    mitosis_density: float = 0.0

    def __post_init__(self):
        if self.shape not in ("rect", "disc"):
            raise ConfigError(f"unknown region shape {self.shape!r}")
        n = 4 if self.shape == "rect" else 3
        if len(self.geometry) != n:
            raise ConfigError(f"{self.shape} region needs {n} geometry values")
        if self.cell_density < 0 or self.mitosis_density < 0:
            raise ConfigError("densities must be >= 0")

    def area_px(self) -> float:
        if self.shape == "rect":
            x0, y0, x1, y1 = self.geometry
            return max(x1 - x0, 0) * max(y1 - y0, 0)
        return math.pi * self.geometry[2] ** 2

    def mask_into(self, mask: np.ndarray) -> None:
        h, w = mask.shape
        if self.shape == "rect":
            x0, y0, x1, y1 = (int(round(v)) for v in self.geometry)
            mask[max(y0, 0) : min(y1, h), max(x0, 0) : min(x1, w)] = True
        else:
            cx, cy, r = self.geometry
            y0, y1 = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, h)
            x0, x1 = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, w)
            ys, xs = np.mgrid[y0:y1, x0:x1]
            mask[y0:y1, x0:x1] |= (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2

    def sample_point(self, rng: np.random.Generator) -> tuple[float, float]:
        if self.shape == "rect":
            x0, y0, x1, y1 = self.geometry
            return rng.uniform(x0, x1), rng.uniform(y0, y1)
        cx, cy, r = self.geometry
        while True:
            x, y = rng.uniform(cx - r, cx + r), rng.uniform(cy - r, cy + r)
            if (x - cx) ** 2 + (y - cy) ** 2 <= r**2:
                return x, y


@dataclass
class SyntheticSlideSpec:
    width: int
    height: int
    mpp: float
    seed: int
    regions: list[DensityRegion] = field(default_factory=list)
    background_rgb: tuple[int, int, int] = (255, 255, 255)
    stain_matrix: tuple[tuple[float, float], ...] = DEFAULT_RENDER_MATRIX
    cell_radius_um: float = 4.0
    mitosis_radius_um: float = 6.0
    level_downsamples: tuple[int, ...] = (1, 8)
    tile_size: int = 512
    i0: float = 255.0
    slide_id: str = "synthetic"
    score_class: int | None = None
    score_continuous: float | None = None

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("slide dimensions must be positive")
        if self.mpp <= 0:
            raise ConfigError("mpp must be > 0")
        if self.tile_size <= 0:
            raise ConfigError("tile_size must be > 0")
        if self.level_downsamples[0] != 1:
            raise ConfigError("first level downsample must be 1")
        if any(b <= a for a, b in zip(self.level_downsamples, self.level_downsamples[1:])):
            raise ConfigError("level downsamples must strictly increase")
        m = np.asarray(self.stain_matrix, dtype=np.float64)
        if m.shape != (3, 2) or np.any(m < 0):
            raise ConfigError("stain_matrix must be 3x2 nonnegative")

    def to_json_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "mpp": self.mpp,
            "seed": self.seed,
            "regions": [
                {
                    "shape": r.shape,
                    "geometry": list(r.geometry),
                    "cell_density": r.cell_density,
                    "mitosis_density": r.mitosis_density,
                }
                for r in self.regions
            ],
            "background_rgb": list(self.background_rgb),
            "stain_matrix": [list(row) for row in self.stain_matrix],
            "cell_radius_um": self.cell_radius_um,
            "mitosis_radius_um": self.mitosis_radius_um,
            "level_downsamples": list(self.level_downsamples),
            "tile_size": self.tile_size,
            "i0": self.i0,
            "slide_id": self.slide_id,
            "score_class": self.score_class,
            "score_continuous": self.score_continuous,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SyntheticSlideSpec":
        known = {
            "width", "height", "mpp", "seed", "regions", "background_rgb", "stain_matrix",
            "cell_radius_um", "mitosis_radius_um", "level_downsamples", "tile_size", "i0",
            "slide_id", "score_class", "score_continuous",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown slide spec keys: {sorted(unknown)}")
        doc = dict(doc)
        regions = [
            DensityRegion(
                shape=r["shape"],
                geometry=tuple(r["geometry"]),
                cell_density=float(r["cell_density"]),
                mitosis_density=float(r.get("mitosis_density", 0.0)),
            )
            for r in doc.pop("regions", [])
        ]
        for key in ("background_rgb", "level_downsamples"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "stain_matrix" in doc:
            doc["stain_matrix"] = tuple(tuple(row) for row in doc["stain_matrix"])
        return cls(regions=regions, **doc)


def _splat_ellipse(target, cx, cy, a, b, theta, amplitude):
    """Add one soft-edged elliptical blob into a concentration field."""
    h, w = target.shape
    reach = max(a, b) + 1.5
    x0, x1 = max(int(cx - reach), 0), min(int(cx + reach) + 2, w)
    y0, y1 = max(int(cy - reach), 0), min(int(cy + reach) + 2, h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs - cx, ys - cy
    ct, st = math.cos(theta), math.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    rho = np.sqrt(u * u + v * v)
    # flat core, thin linear edge
    profile = amplitude * np.clip(4.0 * (1.0 - rho), 0.0, 1.0)
    target[y0:y1, x0:x1] += profile.astype(np.float32)


def _eosin_texture(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-pixel eosin wash from a bilinear coarse random grid."""
    lo, hi = EOSIN_WASH_RANGE
    step = EOSIN_TEXTURE_SCALE
    gh, gw = h // step + 2, w // step + 2
    coarse = rng.uniform(lo, hi, size=(gh, gw)).astype(np.float32)
    ys = np.arange(h, dtype=np.float32) / step
    xs = np.arange(w, dtype=np.float32) / step
    y0 = np.minimum(ys.astype(np.int64), gh - 2)
    x0 = np.minimum(xs.astype(np.int64), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = coarse[y0][:, x0]
    tr = coarse[y0][:, x0 + 1]
    bl = coarse[y0 + 1][:, x0]
    br = coarse[y0 + 1][:, x0 + 1]
    return (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
            + bl * fy * (1 - fx) + br * fy * fx)


def _splat_mitosis(target, cx, cy, radius, amplitude, rng):
    """Darker irregular figure: max-combination of 2-3 offset lobes."""
    h, w = target.shape
    reach = 2.2 * radius
    x0, x1 = max(int(cx - reach), 0), min(int(cx + reach) + 2, w)
    y0, y1 = max(int(cy - reach), 0), min(int(cy + reach) + 2, h)
    n_lobes = int(rng.integers(2, 4))
    offsets = [(0.0, 0.0)] + [
        (rng.uniform(0.4, 0.8) * radius * math.cos(t), rng.uniform(0.4, 0.8) * radius * math.sin(t))
        for t in rng.uniform(0.0, 2.0 * math.pi, size=n_lobes - 1)
    ]
    scales = [1.0] + list(rng.uniform(0.5, 0.8, size=n_lobes - 1))
    thetas = rng.uniform(0.0, math.pi, size=n_lobes)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    combined = np.zeros((y1 - y0, x1 - x0), dtype=np.float32)
    for (ox, oy), s, theta in zip(offsets, scales, thetas):
        a = radius * s * rng.uniform(0.85, 1.15)
        b = radius * s * rng.uniform(0.6, 0.95)
        dx, dy = xs - (cx + ox), ys - (cy + oy)
        ct, st = math.cos(theta), math.sin(theta)
        u = (dx * ct + dy * st) / a
        v = (-dx * st + dy * ct) / b
        rho = np.sqrt(u * u + v * v)
        lobe = amplitude * np.clip(4.0 * (1.0 - rho), 0.0, 1.0)
        np.maximum(combined, lobe.astype(np.float32), out=combined)
    target[y0:y1, x0:x1] += combined


def render_slide_image(spec: SyntheticSlideSpec, rng: np.random.Generator | None = None):
    """Render level-0 RGB pixels plus ground truth for a spec.

    Returns (pixels uint8 (h, w, 3), GroundTruth). Drawing order is fixed so
    a fixed seed reproduces the bytes exactly.
    """
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    c_h = np.zeros((h, w), dtype=np.float32)
    c_e = np.zeros((h, w), dtype=np.float32)
    tissue = np.zeros((h, w), dtype=bool)

    px_per_mm = 1000.0 / spec.mpp
    cell_r = spec.cell_radius_um / spec.mpp
    mito_r = spec.mitosis_radius_um / spec.mpp

    gt = GroundTruth()
    for region in spec.regions:
        region.mask_into(tissue)
        area_mm2 = region.area_px() / (px_per_mm**2)
        n_cells = int(rng.poisson(region.cell_density * area_mm2))
        for _ in range(n_cells):
            x, y = region.sample_point(rng)
            a = cell_r * rng.uniform(0.8, 1.2)
            b = cell_r * rng.uniform(0.65, 1.0)
            theta = rng.uniform(0.0, math.pi)
            amp = rng.uniform(*CELL_AMPLITUDE)
            _splat_ellipse(c_h, x, y, a, b, theta, amp)
            gt.cells.append((int(round(x)), int(round(y))))
        n_mitoses = int(rng.poisson(region.mitosis_density * area_mm2))
        for _ in range(n_mitoses):
            x, y = region.sample_point(rng)
            amp = rng.uniform(*MITOSIS_AMPLITUDE)
            _splat_mitosis(c_h, x, y, mito_r, amp, rng)
            gt.mitoses.append((int(round(x)), int(round(y))))
            gt.cells.append((int(round(x)), int(round(y))))

    # textured cytoplasm wash, displaced where nuclei sit; the resulting OD
    # cloud spans both stain directions, which estimation depends on
    if tissue.any():
        wash = _eosin_texture(h, w, rng)
        suppression = np.clip(1.0 - EOSIN_SUPPRESSION * c_h, 0.0, 1.0)
        c_e[tissue] += (wash * suppression)[tissue]

    stains = np.asarray(spec.stain_matrix, dtype=np.float32)
    od = c_h[..., None] * stains[:, 0] + c_e[..., None] * stains[:, 1]
    pixels = np.clip(np.rint(spec.i0 * np.power(10.0, -od)), 0, 255).astype(np.uint8)
    if tuple(spec.background_rgb) != (255, 255, 255):
        pixels[~tissue] = np.array(spec.background_rgb, dtype=np.uint8)

    # grading truth: densest region's expected count over one 2 mm^2 patch
    peak_density = max((r.mitosis_density for r in spec.regions), default=0.0)
    expected_per_patch = peak_density * 2.0
    gt.score_class = (
        spec.score_class if spec.score_class is not None else br_grade(expected_per_patch)
    )
    gt.score_continuous = (
        spec.score_continuous if spec.score_continuous is not None else float(expected_per_patch)
    )
    return pixels, gt


def downsample_area(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Area-average an RGB image by an integer factor (edge blocks partial)."""
    if factor == 1:
        return pixels
    h, w = pixels.shape[:2]
    row_idx = np.arange(0, h, factor)
    col_idx = np.arange(0, w, factor)
    acc = np.add.reduceat(pixels.astype(np.float64), row_idx, axis=0)
    acc = np.add.reduceat(acc, col_idx, axis=1)
    row_sizes = np.minimum(row_idx + factor, h) - row_idx
    col_sizes = np.minimum(col_idx + factor, w) - col_idx
    counts = np.outer(row_sizes, col_sizes)[..., None]
    return np.clip(np.rint(acc / counts), 0, 255).astype(np.uint8)


def _write_tiles(pixels: np.ndarray, level: int, tile_size: int, out_dir: Path) -> None:
    h, w = pixels.shape[:2]
    rows, cols = tile_grid(w, h, tile_size)
    for r in range(rows):
        for c in range(cols):
            tile = pixels[r * tile_size : (r + 1) * tile_size, c * tile_size : (c + 1) * tile_size]
            write_pnm(out_dir / tile_name(level, r, c), tile)


def reference_stain_patch_spec() -> SyntheticSlideSpec:
    """Recipe for the designated reference patch behind the packaged
    normalization target profile (see prolifscore/data)."""
    return SyntheticSlideSpec(
        width=256,
        height=256,
        mpp=1.0,
        seed=20160701,
        regions=[DensityRegion("rect", (0, 0, 256, 256), cell_density=900.0, mitosis_density=30.0)],
        slide_id="stain-reference",
    )


def generate_synthetic_slide(spec: SyntheticSlideSpec, out_dir) -> tuple[Path, GroundTruth]:
    """Write tiles, manifest, and ground truth; returns (manifest_path, truth)."""
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}") from exc

    pixels, gt = render_slide_image(spec)
    levels = []
    for i, factor in enumerate(spec.level_downsamples):
        lv_pixels = downsample_area(pixels, factor)
        _write_tiles(lv_pixels, i, spec.tile_size, out_dir)
        levels.append(
            {
                "level": i,
                "width": lv_pixels.shape[1],
                "height": lv_pixels.shape[0],
                "downsample": float(factor),
            }
        )

    manifest = {
        "slide": spec.slide_id,
        "mpp_x": spec.mpp,
        "mpp_y": spec.mpp,
        "tile_size": spec.tile_size,
        "levels": levels,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out_dir / "ground_truth.json").write_text(
        json.dumps(gt.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )
    (out_dir / "slide_spec.json").write_text(
        json.dumps(spec.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )
    return manifest_path, gt
