"""Tissue segmentation, tiling and a stub patch featurizer for raster images.

Segmentation follows the usual saturation-threshold recipe: HSV saturation,
median blur, threshold, morphological closing, then connected components
below an area threshold are dropped. Tiles are non-overlapping
``patch_size`` windows kept when at least half their pixels are tissue.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu

from .dataio import SlideBag
from .errors import ValidationError

POOL_GRID = 16


@dataclass(frozen=True)
class SegParams:
    saturation_threshold: int = 20
    median_kernel: int = 7
    closing_kernel: int = 4
    min_area: int = 512
    patch_size: int = 448
    downsample: int = 1
    otsu: bool = False
    min_coverage: float = 0.5

    def __post_init__(self):
        if not 0 <= self.saturation_threshold <= 255:
            raise ValidationError("saturation_threshold must lie in [0, 255]")
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValidationError("median_kernel must be odd and positive")
        if self.closing_kernel < 1:
            raise ValidationError("closing_kernel must be positive")
        if self.min_area < 0 or self.patch_size < 1 or self.downsample < 1:
            raise ValidationError("min_area >= 0, patch_size >= 1 and downsample >= 1 required")
        if not 0.0 < self.min_coverage <= 1.0:
            raise ValidationError("min_coverage must lie in (0, 1]")

    @property
    def window(self) -> int:
        """Patch size in mask pixels."""
        return max(1, self.patch_size // self.downsample)


def load_image(path) -> np.ndarray:
    """H x W x 3 uint8 RGB from a PNG or PPM file."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def saturation(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation on a 0-255 scale: 255 * (max - min) / max, 0 where max is 0."""
    rgb = rgb.astype(np.float64)
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(mx > 0, 255.0 * (mx - mn) / mx, 0.0)
    return np.rint(s).astype(np.uint8)


def segment_tissue(rgb: np.ndarray, p: SegParams = SegParams()) -> np.ndarray:
    """Boolean H x W tissue mask."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[0] < 1 or rgb.shape[1] < 1:
        raise ValidationError(f"expected an H x W x 3 image, got shape {rgb.shape}")
    sat = ndimage.median_filter(saturation(rgb), size=p.median_kernel, mode="nearest")
    if p.otsu:
        thr = threshold_otsu(sat) if sat.min() != sat.max() else 255
    else:
        thr = p.saturation_threshold
    mask = sat > thr
    # pad so closing does not erode tissue touching the border
    k = p.closing_kernel
    padded = np.pad(mask, k, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones((k, k), dtype=bool))[k:-k, k:-k]
    labels, count = ndimage.label(closed, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return closed
    areas = np.bincount(labels.ravel())
    keep = areas >= p.min_area
    keep[0] = False
    return keep[labels]


def tile(mask: np.ndarray, p: SegParams = SegParams()) -> list[tuple[int, int]]:
    """Grid coordinates (x, y) in patch units, row-major, of windows with enough tissue."""
    w = p.window
    h_cells, w_cells = mask.shape[0] // w, mask.shape[1] // w
    coords = []
    need = p.min_coverage * w * w
    for gy in range(h_cells):
        for gx in range(w_cells):
            window = mask[gy * w:(gy + 1) * w, gx * w:(gx + 1) * w]
            if np.count_nonzero(window) >= need:
                coords.append((gx, gy))
    return coords


def _featurizer_matrix(d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xF1A7])
    return rng.standard_normal((POOL_GRID * POOL_GRID * 3, d)) / np.sqrt(POOL_GRID * POOL_GRID * 3)


def _pool(patch: np.ndarray) -> np.ndarray:
    h, w = patch.shape[:2]
    ys = np.linspace(0, h, POOL_GRID + 1).astype(int)
    xs = np.linspace(0, w, POOL_GRID + 1).astype(int)
    out = np.empty((POOL_GRID, POOL_GRID, 3))
    for i in range(POOL_GRID):
        for j in range(POOL_GRID):
            cell = patch[ys[i]:max(ys[i + 1], ys[i] + 1), xs[j]:max(xs[j + 1], xs[j] + 1)]
            out[i, j] = cell.reshape(-1, 3).mean(axis=0)
    return out


def stub_featurize(rgb: np.ndarray, coords, p: SegParams = SegParams(), d: int = 64,
                   seed: int = 0) -> np.ndarray:
    """n x d unit embeddings: 16x16x3 average pooling, fixed random projection."""
    w = p.window
    proj = _featurizer_matrix(d, seed)
    rows = []
    for gx, gy in coords:
        x0, y0 = gx * w, gy * w
        if gx < 0 or gy < 0 or x0 + w > rgb.shape[1] or y0 + w > rgb.shape[0]:
            raise ValidationError(f"patch ({gx}, {gy}) falls outside the {rgb.shape[1]}x{rgb.shape[0]} image")
        patch = rgb[y0:y0 + w, x0:x0 + w].astype(np.float64) / 255.0 - 0.5
        v = _pool(patch).ravel() @ proj
        norm = np.linalg.norm(v)
        rows.append(v / norm if norm > 0 else np.full(d, 1.0 / np.sqrt(d)))
    return np.array(rows).reshape(-1, d)


def write_mask(mask: np.ndarray, path) -> None:
    """Binary mask as 8-bit PGM (P5), tissue = 255."""
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PPM")


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


@dataclass
class PreprocessResult:
    mask: np.ndarray
    coords: list[tuple[int, int]]
    bag: SlideBag | None


def run_pipeline(image_path, out_dir, p: SegParams = SegParams(), *, d: int = 64, seed: int = 0,
                 slide_id: str | None = None, patient_id: str | None = None, label: int = 0) -> PreprocessResult:
    """Image -> ``mask.pgm``, ``coords.json`` and (if any tile survives) ``bag.cpb``."""
    from .dataio import write_bag

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb = load_image(image_path)
    mask = segment_tissue(rgb, p)
    coords = tile(mask, p)
    write_mask(mask, out_dir / "mask.pgm")
    (out_dir / "coords.json").write_text(json.dumps([list(c) for c in coords]) + "\n", encoding="utf-8")
    bag = None
    if coords:
        slide_id = slide_id or Path(image_path).stem
        bag = SlideBag(slide_id, patient_id or slide_id, label,
                       stub_featurize(rgb, coords, p, d, seed), np.array(coords))
        write_bag(bag, out_dir / "bag.cpb")
    return PreprocessResult(mask, coords, bag)


def params_dict(p: SegParams) -> dict:
    return asdict(p)
