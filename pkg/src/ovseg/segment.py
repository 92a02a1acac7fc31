"""End-to-end segmentation.

Two inference routes share one vocabulary of class embeddings. The two-stage
route votes proposal class probabilities into a per-pixel score map (weighted
by soft mask values) and takes the argmax. The baseline route is a per-pixel
classifier trained on seen classes, optionally ensembled with sliding-window
whole-crop classification by the frozen image-text model. Self-training
pseudo-labels ignored pixels and retrains the proposal model on them.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classify import (
    CropConfig,
    EmptyProposalError,
    classify_strategy_a,
    classify_strategy_b,
    ensemble_probs,
    make_crop,
)
from .data import IGNORE_LABEL, GroundTruthSeg, Scene
from .pnm import write_pgm, write_ppm
from .proposals import (
    DivergenceError,
    ProposalSet,
    QueryModel,
    QueryTrainConfig,
    _normalize_rows,
    pixel_features,
    propose,
    train_query_model,
)
from .rng import SplitMix64, sample_distinct
from .vlm import VLModel, classify_embedding, embedding_checksum, log_softmax, softmax

STRATEGIES = ("A", "B", "ensemble")


@dataclass
class ScoreMap:
    """Per-pixel per-class scores; sums need not be 1 on the two-stage route."""

    scores: np.ndarray  # (H, W, C), nonnegative
    covered: np.ndarray  # (H, W) bool, pixels touched by at least one proposal

    def __post_init__(self):
        if self.scores.ndim != 3 or self.covered.shape != self.scores.shape[:2]:
            raise ValueError("scores must be (H, W, C) with matching coverage mask")


@dataclass
class SegResult:
    labels: np.ndarray  # (H, W) int
    covered: np.ndarray  # (H, W) bool


def assemble_scores(proposals: ProposalSet, probs: np.ndarray) -> ScoreMap:
    """Mask-weighted mean of per-proposal class probabilities at each pixel.

    C_i(q) = sum_k M_k(q) p_k(i) / sum_k M_k(q); pixels with zero total mask
    weight are marked uncovered instead of divided.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not proposals.masks:
        raise ValueError("need at least one proposal")
    if probs.ndim != 2 or probs.shape[0] != len(proposals.masks):
        raise ValueError(
            f"probs must be (n_proposals, C), got {probs.shape} for {len(proposals.masks)} proposals"
        )
    masks = np.stack(proposals.masks)
    weight = masks.sum(axis=0)
    votes = np.einsum("khw,kc->hwc", masks, probs)
    covered = weight > 0.0
    scores = np.zeros_like(votes)
    scores[covered] = votes[covered] / weight[covered][:, None]
    return ScoreMap(scores, covered)


def argmax_segmentation(score_map: ScoreMap, fallback: int = 0) -> SegResult:
    """Per-pixel argmax (ties to the lowest index); uncovered gets fallback."""
    labels = np.argmax(score_map.scores, axis=2).astype(np.int64)
    labels[~score_map.covered] = fallback
    return SegResult(labels, score_map.covered.copy())


@dataclass
class SegPipeline:
    """Everything the two-stage route needs at inference time."""

    vlm: VLModel
    query_model: QueryModel
    class_embs: np.ndarray  # (C, d), full vocabulary order
    crop_config: CropConfig = field(default_factory=CropConfig)
    ensemble_lambda: float = 0.5
    strategy: str = "ensemble"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


def _proposal_probs(pipeline: SegPipeline, crop, score_row: np.ndarray) -> np.ndarray:
    vocab_size = pipeline.class_embs.shape[0]
    if pipeline.strategy == "A":
        return classify_strategy_a(pipeline.vlm, crop, pipeline.class_embs).probs
    pb = classify_strategy_b(score_row, pipeline.query_model.class_indices, vocab_size)
    if pipeline.strategy == "B":
        return pb.probs
    pa = classify_strategy_a(pipeline.vlm, crop, pipeline.class_embs)
    return ensemble_probs(pa, pb, pipeline.ensemble_lambda).probs


def segment_image(pipeline: SegPipeline, img: np.ndarray, image_id: str = "image"):
    """Proposals -> per-proposal classification -> score assembly -> argmax.

    Returns (SegResult, ScoreMap, warnings). Proposals that binarize to
    nothing are skipped; if none survive, the whole image is classified as a
    single full-coverage region and a warning is recorded.
    """
    props = propose(pipeline.query_model, img, image_id)
    kept_masks: list[np.ndarray] = []
    kept_probs: list[np.ndarray] = []
    warnings: list[str] = []
    for k, mask in enumerate(props.masks):
        try:
            crop = make_crop(img, mask, pipeline.crop_config, image_id, k)
        except EmptyProposalError:
            continue
        kept_masks.append(mask)
        kept_probs.append(_proposal_probs(pipeline, crop, props.class_scores[k]))
    if not kept_masks:
        warnings.append(f"{image_id}: no proposal survived binarization, whole-image fallback")
        full = np.ones(img.shape[:2])
        crop = make_crop(img, full, pipeline.crop_config, image_id, -1)
        kept_masks = [full]
        kept_probs = [classify_strategy_a(pipeline.vlm, crop, pipeline.class_embs).probs]
    score_map = assemble_scores(ProposalSet(image_id, kept_masks), np.stack(kept_probs))
    return argmax_segmentation(score_map), score_map, warnings


# ---------------------------------------------------------------------------
# Per-pixel baseline


@dataclass
class FCNParams:
    """Per-pixel affine embedder scored against fixed text embeddings."""

    embed_w: np.ndarray  # (8, d)
    embed_b: np.ndarray  # (d,)
    class_embs: np.ndarray  # (S, d) training-time classifier rows
    class_indices: list[int]
    s_b: float = 10.0
    embed_checksum: str = ""

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("embed_w", self.embed_w), ("embed_b", self.embed_b)]


def init_fcn(class_embs: np.ndarray, class_indices: list[int], seed: int) -> FCNParams:
    rng = SplitMix64(seed)
    dim = class_embs.shape[1]
    return FCNParams(
        embed_w=rng.uniform_array((8, dim), -0.05, 0.05),
        embed_b=rng.uniform_array((dim,), -0.05, 0.05),
        class_embs=np.asarray(class_embs, dtype=np.float64),
        class_indices=list(class_indices),
        embed_checksum=embedding_checksum(class_embs),
    )


def fcn_pixel_probs(params: FCNParams, feats: np.ndarray, class_embs: np.ndarray) -> np.ndarray:
    """Softmax over s_b-scaled cosines for every pixel row, (P, C)."""
    un, _ = _normalize_rows(feats @ params.embed_w + params.embed_b)
    return softmax(params.s_b * (un @ class_embs.T), axis=1)


def fcn_loss_and_grads(params: FCNParams, batch: list[tuple[np.ndarray, np.ndarray]]):
    """Cross-entropy over seen-class pixels of the batch, with analytic grads."""
    slot_of = np.full(256, -1, dtype=np.int64)
    for slot, cls in enumerate(params.class_indices):
        slot_of[cls] = slot
    xs, ys = [], []
    for feats, labels in batch:
        slots = slot_of[np.asarray(labels, dtype=np.int64)]
        valid = slots >= 0
        xs.append(feats[valid])
        ys.append(slots[valid])
    x = np.concatenate(xs, axis=0)
    y = np.concatenate(ys, axis=0)
    if x.shape[0] == 0:
        raise ValueError("batch contains no seen-class pixels")
    z = x @ params.embed_w + params.embed_b
    un, norms = _normalize_rows(z)
    logits = params.s_b * (un @ params.class_embs.T)
    ls = log_softmax(logits, axis=1)
    n = x.shape[0]
    loss = float(-ls[np.arange(n), y].mean())
    dlogits = (np.exp(ls) - np.eye(len(params.class_indices))[y]) / n
    dun = params.s_b * (dlogits @ params.class_embs)
    dz = (dun - (dun * un).sum(axis=1, keepdims=True) * un) / norms
    return loss, {"embed_w": x.T @ dz, "embed_b": dz.sum(axis=0)}


@dataclass
class FCNTrainConfig:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 42


def train_fcn(
    items: list[tuple[np.ndarray, np.ndarray]],
    class_embs: np.ndarray,
    class_indices: list[int],
    config: FCNTrainConfig,
):
    """SGD on the pixel embedder; classifier rows stay frozen."""
    if not items:
        raise ValueError("need at least one training item")
    params = init_fcn(class_embs, class_indices, config.seed)
    rng = SplitMix64(config.seed)
    velocity = {name: np.zeros_like(arr) for name, arr in params.param_items()}
    batch_size = min(config.batch_size, len(items))
    first_loss = None
    loss = 0.0
    for step in range(config.steps):
        batch = [items[i] for i in sample_distinct(rng, len(items), batch_size)]
        loss, grads = fcn_loss_and_grads(params, batch)
        if not math.isfinite(loss):
            raise DivergenceError(f"pixel-classifier loss became non-finite at step {step}")
        if first_loss is None:
            first_loss = loss
        for name, arr in params.param_items():
            velocity[name] = config.momentum * velocity[name] + grads[name]
            arr -= config.lr * velocity[name]
    log = {"first_batch_loss": first_loss, "last_batch_loss": loss, "steps": config.steps}
    return params, log


def fcn_scores(params: FCNParams, img: np.ndarray, class_embs: np.ndarray) -> ScoreMap:
    """Per-pixel probabilities over whatever embedding rows are supplied."""
    h, w = img.shape[:2]
    probs = fcn_pixel_probs(params, pixel_features(img), class_embs)
    return ScoreMap(probs.reshape(h, w, -1), np.ones((h, w), dtype=bool))


def sliding_window_scores(
    model: VLModel,
    img: np.ndarray,
    class_embs: np.ndarray,
    window: int = 32,
    stride: int = 16,
) -> ScoreMap:
    """Average whole-crop classification over overlapping square windows.

    The final start along each axis is clamped so the image edge is covered.
    With window == image size this is exactly one whole-image classification.
    """
    h, w = img.shape[:2]
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if window > h or window > w:
        raise ValueError(f"window {window} exceeds image {h}x{w}")

    def starts(n: int) -> list[int]:
        out = list(range(0, n - window + 1, stride))
        if out[-1] != n - window:
            out.append(n - window)
        return out

    acc = np.zeros((h, w, class_embs.shape[0]))
    cnt = np.zeros((h, w))
    for r in starts(h):
        for c in starts(w):
            patch = img[r : r + window, c : c + window]
            probs = classify_embedding(model.encode_vision(patch), class_embs, model.s_eval)
            acc[r : r + window, c : c + window] += probs
            cnt[r : r + window, c : c + window] += 1.0
    return ScoreMap(acc / cnt[:, :, None], np.ones((h, w), dtype=bool))


def ensemble_score_maps(pa: ScoreMap, pb: ScoreMap, lam: float = 0.5) -> ScoreMap:
    """Per-pixel geometric interpolation, same floor rule as region ensembling."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    mixed = pa.scores**lam * np.maximum(pb.scores, 1e-6) ** (1.0 - lam)
    return ScoreMap(mixed / mixed.sum(axis=2, keepdims=True), pa.covered & pb.covered)


# ---------------------------------------------------------------------------
# Self-training


def pseudo_label(
    pipeline: SegPipeline,
    scenes: list[Scene],
    unseen_indices: list[int],
    threshold: float = 0.9,
):
    """Relabel confident unseen-class predictions on ignore pixels only.

    Confidence is the score map renormalized per pixel; ground-truth labels of
    seen classes are never touched. Returns (new scenes, relabeled count).
    """
    unseen = np.zeros(max(pipeline.class_embs.shape[0], IGNORE_LABEL + 1), dtype=bool)
    unseen[list(unseen_indices)] = True
    out: list[Scene] = []
    total = 0
    for scene in scenes:
        seg, smap, _ = segment_image(pipeline, scene.image.as_float(), scene.scene_id)
        labels = scene.gt.labels.copy()
        sums = smap.scores.sum(axis=2)
        top = np.take_along_axis(smap.scores, seg.labels[:, :, None], axis=2)[:, :, 0]
        conf = np.divide(top, sums, out=np.zeros_like(top), where=sums > 0)
        relabel = (
            (labels == IGNORE_LABEL) & smap.covered & unseen[seg.labels] & (conf >= threshold)
        )
        labels[relabel] = seg.labels[relabel].astype(np.uint8)
        total += int(relabel.sum())
        out.append(Scene(scene.scene_id, scene.image, GroundTruthSeg(labels), scene.caption))
    return out, total


def self_train(
    pipeline: SegPipeline,
    scenes: list[Scene],
    unseen_indices: list[int],
    config: QueryTrainConfig,
    threshold: float = 0.9,
    rounds: int = 1,
):
    """Pseudo-label, then retrain the proposal model over the full vocabulary.

    rounds=0 returns the pipeline untouched. Returns (pipeline, log).
    """
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    log: dict = {"rounds": rounds, "relabeled": []}
    for _ in range(rounds):
        augmented, n = pseudo_label(pipeline, scenes, unseen_indices, threshold)
        items = [(pixel_features(s.image.as_float()), s.gt.labels.ravel()) for s in augmented]
        all_classes = list(range(pipeline.class_embs.shape[0]))
        retrained, train_log = train_query_model(items, pipeline.class_embs, all_classes, config)
        pipeline = replace(pipeline, query_model=retrained)
        log["relabeled"].append(n)
        log["train"] = train_log
    return pipeline, log


# ---------------------------------------------------------------------------
# Export


def save_fcn(params: FCNParams, path: str | Path) -> None:
    doc = {
        "kind": "fcn",
        "s_b": params.s_b,
        "class_indices": params.class_indices,
        "embed_checksum": params.embed_checksum,
        "class_embs": params.class_embs.tolist(),
        "params": {name: arr.tolist() for name, arr in params.param_items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_fcn(path: str | Path) -> FCNParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "fcn":
        raise ValueError(f"{path}: not a pixel-classifier checkpoint")
    p = doc["params"]
    return FCNParams(
        embed_w=np.array(p["embed_w"]),
        embed_b=np.array(p["embed_b"]),
        class_embs=np.array(doc["class_embs"]),
        class_indices=[int(i) for i in doc["class_indices"]],
        s_b=doc["s_b"],
        embed_checksum=doc["embed_checksum"],
    )


def class_palette(n: int) -> np.ndarray:
    """Deterministic distinct-ish colors per class index, (n, 3) uint8."""
    root = SplitMix64(0)
    rows = [np.round(root.split(i).uniform_array(3, 32.0, 255.0)) for i in range(n)]
    return np.stack(rows).astype(np.uint8)


def save_label_map(labels: np.ndarray, path: str | Path) -> None:
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label map does not fit in 8 bits")
    write_pgm(path, labels.astype(np.uint8))


def save_overlay(img: np.ndarray, labels: np.ndarray, path: str | Path) -> None:
    """Class colors alpha-blended at 50% over the image, as PPM."""
    palette = class_palette(int(labels.max()) + 1)
    blend = 0.5 * img * 255.0 + 0.5 * palette[labels].astype(np.float64)
    write_ppm(path, np.round(blend).astype(np.uint8))
