"""Detection evaluation: IoU, Pascal matching, AP/mAP, CorLoc, mask envelopes.

Boxes use half-open pixel coordinates ``[x_min, x_max) x [y_min, y_max)``
with the origin at the top-left and x running along columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {vals}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BoundingBox":
        x0, y0, x1, y1 = values
        return cls(float(x0), float(y0), float(x1), float(y1))


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: BoundingBox


@dataclass
class MatchOutcome:
    """Per-detection TP verdicts (in the order matched) and per-GT flags."""

    tp: list[bool]
    gt_matched: list[bool]
    detections: list[Detection] = field(default_factory=list)

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def n_fp(self) -> int:
        return len(self.tp) - self.n_tp


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape (N, 4) and (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def sort_by_confidence(detections: Sequence[Detection]) -> list[Detection]:
    """Descending confidence; ties keep their input order."""
    return sorted(detections, key=lambda d: -d.confidence)


def match_detections(
    detections: Sequence[Detection], gt: Sequence[GroundTruth], iou_threshold: float = 0.5
) -> MatchOutcome:
    """Greedy Pascal matching within each class.

    Each detection, in descending confidence, claims the highest-IoU GT of
    its class that is still unmatched; it is a TP when that IoU reaches the
    threshold and an FP otherwise.
    """
    dets = sort_by_confidence(detections)
    matched = [False] * len(gt)
    verdicts: list[bool] = []
    for det in dets:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gt):
            if matched[j] or g.class_id != det.class_id:
                continue
            o = iou(det.box, g.box)
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0 and best_iou >= iou_threshold:
            matched[best] = True
            verdicts.append(True)
        else:
            verdicts.append(False)
    return MatchOutcome(verdicts, matched, dets)


def average_precision(tp: Sequence[bool], n_gt: int, mode: str = "all_point") -> float:
    """AP of a detection stream already sorted by descending confidence."""
    if n_gt < 1:
        raise ValueError("average_precision needs at least one ground-truth box")
    flags = np.asarray(tp, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    recall = tp_cum / n_gt
    prec = tp_cum / (tp_cum + fp_cum)
    if mode == "all_point":
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], prec, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
        return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    if mode == "voc11":
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            above = prec[recall >= r - 1e-12]
            total += above.max() if above.size else 0.0
        return float(total / 11.0)
    raise ValueError(f"unknown AP mode {mode!r}")


@dataclass
class MeanAPResult:
    map: float
    per_class_ap: dict[str, float]
    excluded: list[str]
    outcomes: list[MatchOutcome]

    @property
    def n_tp(self) -> int:
        return sum(o.n_tp for o in self.outcomes)

    @property
    def n_fp(self) -> int:
        return sum(o.n_fp for o in self.outcomes)


def mean_ap(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[GroundTruth]],
    class_names: Sequence[str],
    iou_threshold: float = 0.5,
    mode: str = "all_point",
) -> MeanAPResult:
    """Unweighted mean AP over classes that have at least one GT box.

    ``detections[i]`` and ``ground_truth[i]`` belong to image ``i``. Classes
    without GT are reported in ``excluded`` and left out of the mean.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth must cover the same images")
    outcomes = [match_detections(d, g, iou_threshold) for d, g in zip(detections, ground_truth)]
    per_class: dict[str, float] = {}
    excluded: list[str] = []
    for cid, cname in enumerate(class_names):
        n_gt = sum(1 for gts in ground_truth for g in gts if g.class_id == cid)
        if n_gt == 0:
            excluded.append(cname)
            continue
        stream = [
            (det.confidence, ok)
            for out in outcomes
            for det, ok in zip(out.detections, out.tp)
            if det.class_id == cid
        ]
        stream.sort(key=lambda s: -s[0])
        per_class[cname] = average_precision([ok for _, ok in stream], n_gt, mode)
    value = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return MeanAPResult(value, per_class, excluded, outcomes)


def corloc(outcomes: Sequence[MatchOutcome]) -> float | None:
    """TP / (TP + FP) over every emitted detection; None when nothing was emitted."""
    tp = sum(o.n_tp for o in outcomes)
    fp = sum(o.n_fp for o in outcomes)
    if tp + fp == 0:
        return None
    return tp / (tp + fp)


def corloc_per_image(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[GroundTruth]],
    iou_threshold: float = 0.5,
) -> float | None:
    """Fraction of (image, present class) pairs whose top detection hits a GT of that class."""
    hits = total = 0
    for dets, gts in zip(detections, ground_truth):
        for cid in sorted({g.class_id for g in gts}):
            total += 1
            own = sort_by_confidence([d for d in dets if d.class_id == cid])
            if own and any(iou(own[0].box, g.box) >= iou_threshold for g in gts if g.class_id == cid):
                hits += 1
    return hits / total if total else None


def mask_to_bbox(mask) -> BoundingBox:
    """Tightest half-open box around the nonzero pixels of a 2-D mask."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask has no foreground pixels")
    return BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
