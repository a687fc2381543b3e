"""Per-concept similarity maps over a slide's patch grid."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .aggregator import ForwardOutput
from .conceptbank import ConceptBank
from .dataio import SlideBag


@dataclass
class SimilarityMap:
    class_name: str
    concept_index: int
    concept_text: str
    source: dict | None
    width: int
    height: int
    scores: np.ndarray   # height x width, NaN where no patch
    raw_min: float
    raw_max: float

    def cell(self, x: int, y: int) -> float | None:
        v = self.scores[y, x]
        return None if np.isnan(v) else float(v)


def similarity_map(bag: SlideBag, out: ForwardOutput, bank: ConceptBank, class_index: int,
                   concept_index: int) -> SimilarityMap:
    """Min-max normalized raw patch/concept similarities; a constant column maps to 0.5."""
    if not 0 <= class_index < len(out.similarities):
        raise IndexError(f"class index {class_index} out of range")
    sims = out.similarities[class_index]
    if not 0 <= concept_index < sims.shape[1]:
        raise IndexError(f"concept index {concept_index} out of range (class has {sims.shape[1]})")
    if sims.shape[0] != bag.n:
        raise ValueError("forward output does not belong to this bag")
    raw = sims[:, concept_index]
    lo, hi = float(raw.min()), float(raw.max())
    norm = np.full(raw.shape, 0.5) if hi == lo else (raw - lo) / (hi - lo)

    coords = bag.coords.astype(np.int64)
    width, height = int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1
    grid = np.full((height, width), np.nan)
    grid[coords[:, 1], coords[:, 0]] = norm

    entry = bank.classes[class_index]
    source = None
    if concept_index < len(entry.expert_concepts):
        source = entry.expert_concepts[concept_index].source.to_json()
    return SimilarityMap(entry.name, concept_index, entry.concept_label(concept_index), source,
                         width, height, grid, lo, hi)


def quantize(scores: np.ndarray) -> np.ndarray:
    return np.where(np.isnan(scores), 0, np.rint(np.nan_to_num(scores) * 255)).astype(np.uint8)


def write_heatmap(smap: SimilarityMap, path, zoom: int = 1) -> Path:
    """Write a P5 PGM (background 0) and a ``.json`` sidecar next to it."""
    path = Path(path)
    pixels = quantize(smap.scores)
    if zoom > 1:
        pixels = np.kron(pixels, np.ones((zoom, zoom), dtype=np.uint8))
    Image.fromarray(pixels, mode="L").save(path, format="PPM")
    sidecar = {
        "class": smap.class_name,
        "concept_index": smap.concept_index,
        "concept_text": smap.concept_text,
        "source": smap.source,
        "grid": {"width": smap.width, "height": smap.height, "zoom": zoom},
        "normalization": {"method": "min-max per slide", "raw_min": smap.raw_min, "raw_max": smap.raw_max},
    }
    side = path.with_suffix(".json")
    side.write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return side


def read_heatmap(path, zoom: int = 1) -> np.ndarray:
    """Quantized scores in [0, 1] (background reads as 0)."""
    with Image.open(path) as im:
        px = np.asarray(im.convert("L"), dtype=np.float64)
    return px[::zoom, ::zoom] / 255.0
