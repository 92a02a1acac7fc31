"""Segmentation metrics and evaluation protocols.

Confusion counts accumulate per image (integer, order-free), then turn into
per-class IoU, subset mIoU, the seen/unseen harmonic mean, and pixel
accuracy. The oracle protocol relabels binarized proposals by their largest
ground-truth overlap and pushes them through the same score assembly as the
real classifier, so only proposal quality is measured.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import IGNORE_LABEL, GroundTruthSeg, Scene, SplitSpec, Vocabulary
from .proposals import ProposalSet, QueryModel, propose
from .segment import (
    FCNParams,
    ScoreMap,
    SegPipeline,
    argmax_segmentation,
    assemble_scores,
    ensemble_score_maps,
    fcn_scores,
    segment_image,
    sliding_window_scores,
)
from .vlm import VLModel


class UndefinedMetricError(ValueError):
    """Metric requested over an empty effective class subset."""


@dataclass
class ConfusionMatrix:
    """K x K counts, ground truth in rows, predictions in columns."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"expected square counts, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("counts must be nonnegative")

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray | GroundTruthSeg, k: int) -> ConfusionMatrix:
    """Counts over non-ignore pixels; out-of-range labels are rejected."""
    gt_labels = gt.labels if isinstance(gt, GroundTruthSeg) else gt
    pred = np.asarray(pred)
    if pred.shape != gt_labels.shape:
        raise ValueError(f"prediction {pred.shape} does not match ground truth {gt_labels.shape}")
    valid = gt_labels != IGNORE_LABEL
    g = gt_labels[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= k or p.max() >= k or p.min() < 0):
        raise ValueError(f"labels outside [0, {k})")
    counts = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts)


def iou_per_class(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """(IoU per class, validity mask); classes absent from gt and pred are invalid."""
    inter = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    valid = union > 0
    iou = np.divide(inter, union, out=np.zeros(cm.k), where=valid)
    return iou, valid


def miou(cm: ConfusionMatrix, subset: list[int] | None = None) -> float:
    """Mean IoU over the subset's valid classes (all classes by default)."""
    iou, valid = iou_per_class(cm)
    keep = valid if subset is None else (valid & np.isin(np.arange(cm.k), list(subset)))
    if not keep.any():
        raise UndefinedMetricError("no class in the subset appears in gt or prediction")
    return float(iou[keep].mean())


def hiou(miou_seen: float, miou_unseen: float) -> float:
    """Harmonic mean 2ab/(a+b); 0 when both sides are 0."""
    if miou_seen + miou_unseen == 0.0:
        return 0.0
    return 2.0 * miou_seen * miou_unseen / (miou_seen + miou_unseen)


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = int(cm.counts.sum())
    if total == 0:
        raise UndefinedMetricError("no non-ignore pixels to score")
    return float(np.trace(cm.counts) / total)


@dataclass
class MetricsReport:
    """All scalars as fractions in [0, 1]; reports scale them by 100."""

    per_class_iou: dict[str, float]
    miou_all: float
    pacc: float
    miou_seen: float | None = None
    miou_unseen: float | None = None
    hiou: float | None = None
    miou_thing: float | None = None
    miou_stuff: float | None = None
    thing_stuff_delta: float | None = None

    def scaled(self) -> dict[str, float]:
        """Percentage view of every defined scalar, for summaries."""
        out = {}
        for key in (
            "miou_all",
            "miou_seen",
            "miou_unseen",
            "hiou",
            "pacc",
            "miou_thing",
            "miou_stuff",
            "thing_stuff_delta",
        ):
            value = getattr(self, key)
            if value is not None:
                out[key] = round(100.0 * value, 4)
        return out


def _subset_miou_or_none(cm: ConfusionMatrix, subset: list[int]) -> float | None:
    try:
        return miou(cm, subset)
    except UndefinedMetricError:
        return None


def compute_report(cm: ConfusionMatrix, vocab: Vocabulary, split: SplitSpec | None = None) -> MetricsReport:
    if cm.k != len(vocab):
        raise ValueError(f"confusion matrix is {cm.k}x{cm.k} but vocabulary has {len(vocab)}")
    iou, valid = iou_per_class(cm)
    per_class = {name: float(iou[i]) for i, name in enumerate(vocab.names) if valid[i]}
    report = MetricsReport(per_class_iou=per_class, miou_all=miou(cm), pacc=pixel_accuracy(cm))
    report.miou_thing = _subset_miou_or_none(cm, vocab.indices_of_kind("thing"))
    report.miou_stuff = _subset_miou_or_none(cm, vocab.indices_of_kind("stuff"))
    if report.miou_thing is not None and report.miou_stuff is not None:
        report.thing_stuff_delta = report.miou_thing - report.miou_stuff
    if split is not None:
        report.miou_seen = _subset_miou_or_none(cm, list(split.seen))
        report.miou_unseen = _subset_miou_or_none(cm, list(split.unseen))
        if report.miou_seen is not None and report.miou_unseen is not None:
            report.hiou = hiou(report.miou_seen, report.miou_unseen)
    return report


# ---------------------------------------------------------------------------
# Oracle protocol


def oracle_assign(proposals: ProposalSet, gt: GroundTruthSeg, k: int, threshold: float = 0.5):
    """(proposal index, class) pairs by largest non-ignore overlap.

    Ties break to the lowest class index; proposals overlapping only ignore
    pixels are dropped.
    """
    labels = gt.labels
    assigned: list[tuple[int, int]] = []
    for idx, mask in enumerate(proposals.masks):
        fg = (mask >= threshold) & (labels != IGNORE_LABEL)
        if not fg.any():
            continue
        overlaps = np.bincount(labels[fg].astype(np.int64), minlength=k)
        assigned.append((idx, int(np.argmax(overlaps))))
    return assigned


def oracle_score_map(proposals: ProposalSet, gt: GroundTruthSeg, k: int, threshold: float = 0.5) -> ScoreMap:
    """One-hot oracle labels voted through the standard score assembly."""
    assigned = oracle_assign(proposals, gt, k, threshold)
    if not assigned:
        h, w = gt.labels.shape
        return ScoreMap(np.zeros((h, w, k)), np.zeros((h, w), dtype=bool))
    masks = [(proposals.masks[idx] >= threshold).astype(np.float64) for idx, _ in assigned]
    probs = np.eye(k)[[cls for _, cls in assigned]]
    return assemble_scores(ProposalSet(proposals.image_id, masks), probs)


# ---------------------------------------------------------------------------
# Protocol runners: each yields per-scene predicted label maps


def evaluate_segmenter(segmenter, scenes: list[Scene], k: int) -> ConfusionMatrix:
    """Sum of per-scene confusion matrices (order-free integer reduction)."""
    total = ConfusionMatrix(np.zeros((k, k), dtype=np.int64))
    for scene in scenes:
        total = total + confusion_matrix(segmenter(scene), scene.gt, k)
    return total


def two_stage_segmenter(pipeline: SegPipeline):
    def run(scene: Scene) -> np.ndarray:
        seg, _, _ = segment_image(pipeline, scene.image.as_float(), scene.scene_id)
        return seg.labels

    return run


def fcn_segmenter(
    params: FCNParams,
    class_embs: np.ndarray,
    sw: tuple[VLModel, int, int, float] | None = None,
):
    """Plain per-pixel baseline; with sw=(vlm, window, stride, lam) the frozen
    whole-crop scores are ensembled in per pixel."""

    def run(scene: Scene) -> np.ndarray:
        img = scene.image.as_float()
        scores = fcn_scores(params, img, class_embs)
        if sw is not None:
            vlm, window, stride, lam = sw
            frozen = sliding_window_scores(vlm, img, class_embs, window, stride)
            scores = ensemble_score_maps(frozen, scores, lam)
        return argmax_segmentation(scores).labels

    return run


def oracle_segmenter(query_model: QueryModel, k: int, threshold: float = 0.5):
    def run(scene: Scene) -> np.ndarray:
        props = propose(query_model, scene.image.as_float(), scene.scene_id)
        return argmax_segmentation(oracle_score_map(props, scene.gt, k, threshold)).labels

    return run


# ---------------------------------------------------------------------------
# Emission


def write_metrics_csv(report: MetricsReport, vocab: Vocabulary, path: str | Path) -> None:
    """One row per class; IoU blank for classes absent from gt and prediction."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou"])
        for name in vocab.names:
            if name in report.per_class_iou:
                writer.writerow([name, f"{100.0 * report.per_class_iou[name]:.4f}"])
            else:
                writer.writerow([name, ""])


def markdown_table(headers: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return "\n".join(lines) + "\n"


def format_metric(value: float | None) -> str:
    return "-" if value is None else f"{100.0 * value:.1f}"
