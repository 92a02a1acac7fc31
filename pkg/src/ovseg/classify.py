"""Region classification on masked crops.

A proposal becomes a crop: binarize, take the tight foreground box, expand it
about its center, fill the background pixels, and resize. Strategy A scores
the crop with the frozen image-text model over the full vocabulary; strategy
B reuses the query model's class probabilities (seen classes only); the
ensemble is a per-class geometric interpolation of the two.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Scene
from .pnm import write_ppm
from .rng import SplitMix64
from .vlm import VLModel, area_resize, classify_embedding

FILL_MODES = ("preserve", "zero", "mean")


class EmptyProposalError(ValueError):
    """Proposal with no pixel above the binarization threshold."""


@dataclass
class CropConfig:
    threshold: float = 0.5
    expand: float = 1.2
    fill: str = "mean"
    size: int = 16
    mean_rgb: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.expand < 1.0:
            raise ValueError(f"expansion ratio must be >= 1, got {self.expand}")
        if self.size < 1:
            raise ValueError(f"crop size must be >= 1, got {self.size}")
        if self.fill not in FILL_MODES:
            raise ValueError(f"fill must be one of {FILL_MODES}, got {self.fill!r}")
        self.mean_rgb = np.asarray(self.mean_rgb, dtype=np.float64)


@dataclass
class Crop:
    pixels: np.ndarray  # (S, S, 3) float in [0, 1]
    image_id: str
    proposal_index: int
    bbox: tuple[int, int, int, int]  # r0, c0, r1, c1 inclusive, after expansion


def dataset_mean_rgb(scenes: list[Scene]) -> np.ndarray:
    """Mean RGB (floats in [0,1]) over all pixels of the given scenes."""
    total = np.zeros(3)
    count = 0
    for scene in scenes:
        total += scene.image.as_float().sum(axis=(0, 1))
        count += scene.image.height * scene.image.width
    return total / count


def _expand_span(lo: int, hi: int, ratio: float, limit: int) -> tuple[int, int]:
    """Expand the inclusive [lo, hi] index span by `ratio` about its center."""
    span = hi - lo + 1
    center = (lo + hi + 1) / 2.0
    half = span * ratio / 2.0
    new_lo = math.floor(center - half)
    new_hi = math.ceil(center + half) - 1
    return max(new_lo, 0), min(new_hi, limit - 1)


def make_crop(
    img: np.ndarray,
    mask: np.ndarray,
    config: CropConfig,
    image_id: str = "image",
    proposal_index: int = 0,
) -> Crop:
    """Foreground crop of a soft mask; see module docstring for the recipe."""
    h, w = mask.shape
    fg = mask >= config.threshold
    if not fg.any():
        raise EmptyProposalError(f"{image_id}[{proposal_index}]: no pixel >= {config.threshold}")
    rows = np.nonzero(fg.any(axis=1))[0]
    cols = np.nonzero(fg.any(axis=0))[0]
    r0, r1 = _expand_span(int(rows[0]), int(rows[-1]), config.expand, h)
    c0, c1 = _expand_span(int(cols[0]), int(cols[-1]), config.expand, w)
    window = img[r0 : r1 + 1, c0 : c1 + 1].copy()
    if config.fill != "preserve":
        bg = ~fg[r0 : r1 + 1, c0 : c1 + 1]
        window[bg] = 0.0 if config.fill == "zero" else config.mean_rgb
    return Crop(
        pixels=area_resize(window, config.size),
        image_id=image_id,
        proposal_index=proposal_index,
        bbox=(r0, c0, r1, c1),
    )


@dataclass
class ClassProbabilities:
    probs: np.ndarray  # (C,) over the full vocabulary
    strategy: str  # "A" | "B" | "ensemble"

    def __post_init__(self):
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be nonnegative")


def classify_strategy_a(model: VLModel, crop: Crop, class_embs: np.ndarray) -> ClassProbabilities:
    """Frozen-model classification of the crop over the full vocabulary."""
    v = model.encode_vision(crop.pixels)
    return ClassProbabilities(classify_embedding(v, class_embs, model.s_eval), "A")


def classify_strategy_b(scores: np.ndarray, class_indices: list[int], vocab_size: int) -> ClassProbabilities:
    """Query-model class scores mapped onto the full vocabulary.

    Drops the trailing no-object entry and renormalizes over the covered
    classes; uncovered classes get probability zero. A row with literally all
    mass on no-object degenerates to uniform over the covered classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != len(class_indices) + 1:
        raise ValueError(
            f"expected {len(class_indices)} class scores + no-object, got {scores.shape[0]}"
        )
    seen = scores[:-1]
    total = seen.sum()
    full = np.zeros(vocab_size)
    if total == 0.0:
        full[class_indices] = 1.0 / len(class_indices)
    else:
        full[class_indices] = seen / total
    return ClassProbabilities(full, "B")


def ensemble_probs(pa: ClassProbabilities, pb: ClassProbabilities, lam: float = 0.5) -> ClassProbabilities:
    """p_i proportional to pA_i^lam * max(pB_i, 1e-6)^(1-lam)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    mixed = pa.probs**lam * np.maximum(pb.probs, 1e-6) ** (1.0 - lam)
    return ClassProbabilities(mixed / mixed.sum(), "ensemble")


@dataclass
class RegionSample:
    """A ground-truth region crop with its class label (for prompt work)."""

    crop: Crop
    class_index: int


def collect_region_samples(
    scenes: list[Scene],
    class_indices: list[int],
    config: CropConfig,
    per_class: int | None = None,
    seed: int = 0,
) -> list[RegionSample]:
    """Ground-truth region crops for the given classes, optionally subsampled.

    Each scene contributes one crop per listed class present in its labels.
    With per_class set, each class keeps at most that many samples, chosen by
    a seeded shuffle; ordering is deterministic either way.
    """
    by_class: dict[int, list[RegionSample]] = {c: [] for c in class_indices}
    for scene in scenes:
        img = scene.image.as_float()
        labels = scene.gt.labels
        for cls in class_indices:
            mask = (labels == cls).astype(np.float64)
            if not mask.any():
                continue
            crop = make_crop(img, mask, config, scene.scene_id, -1)
            by_class[cls].append(RegionSample(crop, cls))
    rng = SplitMix64(seed)
    out: list[RegionSample] = []
    for cls in class_indices:
        samples = by_class[cls]
        if per_class is not None and len(samples) > per_class:
            rng.shuffle(samples)
            samples = sorted(samples[:per_class], key=lambda s: s.crop.image_id)
        out.extend(samples)
    return out


def save_crop_debug(crop: Crop, probs: dict[str, ClassProbabilities], directory: str | Path) -> None:
    """PPM of the crop plus a JSON sidecar of per-strategy probabilities."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    stem = f"{crop.image_id}_p{crop.proposal_index:03d}"
    write_ppm(root / f"{stem}.ppm", np.round(crop.pixels * 255.0).astype(np.uint8))
    doc = {
        "image_id": crop.image_id,
        "proposal_index": crop.proposal_index,
        "bbox": list(crop.bbox),
        "probs": {tag: p.probs.tolist() for tag, p in probs.items()},
    }
    (root / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
