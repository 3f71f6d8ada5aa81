"""Detection and retrieval metrics: IoU, NMS, greedy matching, AP/mAP, Recall@k."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyQuerySet, NoPositives


@dataclass(frozen=True, order=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class Detection:
    image_id: str
    bbox: BBox
    class_id: str
    score: float
    metadata: tuple = ()

    def __post_init__(self):
        # retrieval similarities are cosines, so the lower bound is -1
        if not -1.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} out of range")

    def to_json(self) -> dict:
        rec = {"image": self.image_id, "bbox": self.bbox.as_list(), "class": self.class_id, "score": self.score}
        rec.update(dict(self.metadata))
        return rec


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    bbox: BBox
    class_id: str


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def detection_order(d: Detection):
    """Canonical ranking key: score descending, then image, class and box."""
    return (-d.score, d.image_id, d.class_id, d.bbox.as_list())


def nms(detections, iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class non-maximum suppression (per image)."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    kept: list[Detection] = []
    by_group: dict[tuple, list[Detection]] = {}
    for d in sorted(detections, key=lambda d: (-d.score, d.bbox.as_list())):
        group = by_group.setdefault((d.image_id, d.class_id), [])
        if all(iou(d.bbox, k.bbox) < iou_threshold for k in group):
            group.append(d)
            kept.append(d)
    return kept


def match_detections(detections, ground_truths, iou_threshold: float = 0.5) -> list[tuple[Detection, bool]]:
    """Label each detection TP/FP by greedy matching in canonical score order.

    A detection takes the still-unmatched ground truth of its image and class
    with the highest IoU (at least ``iou_threshold``); ties go to the earlier
    ground truth.
    """
    gts: dict[tuple, list[GroundTruth]] = {}
    for g in ground_truths:
        gts.setdefault((g.image_id, g.class_id), []).append(g)
    used = {key: [False] * len(v) for key, v in gts.items()}
    out = []
    for d in sorted(detections, key=detection_order):
        key = (d.image_id, d.class_id)
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts.get(key, ())):
            if used[key][j]:
                continue
            o = iou(d.bbox, g.bbox)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            used[key][best] = True
        out.append((d, best >= 0))
    return out


def pr_curve(labels, total_positives: int) -> list[tuple[float, float]]:
    """Cumulative (precision, recall) after each detection in ranked order."""
    if total_positives < 1:
        raise NoPositives("precision/recall needs at least one positive")
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    ranks = np.arange(1, len(tp) + 1)
    return [(float(p), float(r)) for p, r in zip(tp / ranks, tp / total_positives)]


def average_precision(points) -> float:
    """Area under the precision envelope (all-points interpolation)."""
    if not points:
        return 0.0
    prec = np.array([0.0] + [p for p, _ in points] + [0.0])
    rec = np.array([0.0] + [r for _, r in points] + [1.0])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.flatnonzero(rec[1:] != rec[:-1])
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


def mean_ap(per_class_ap: dict) -> float:
    if not per_class_ap:
        raise NoPositives("no class has ground truth")
    return float(np.mean(list(per_class_ap.values())))


def evaluate_detections(detections, ground_truths, iou_threshold: float = 0.5, per_class: bool = False) -> dict:
    """mAP report over classes that have ground truth."""
    detections, ground_truths = list(detections), list(ground_truths)
    labeled = match_detections(detections, ground_truths, iou_threshold)
    positives: dict[str, int] = {}
    for g in ground_truths:
        positives[g.class_id] = positives.get(g.class_id, 0) + 1
    if not positives:
        raise NoPositives("no ground truth boxes")

    curves, aps = {}, {}
    for cls in sorted(positives):
        flags = [tp for d, tp in labeled if d.class_id == cls]
        curves[cls] = pr_curve(flags, positives[cls])
        aps[cls] = average_precision(curves[cls])
    report = {
        "mAP": mean_ap(aps),
        "per_class_ap": aps,
        "pr_points": (
            {c: [list(p) for p in pts] for c, pts in curves.items()}
            if per_class
            else [list(p) for p in pr_curve([tp for _, tp in labeled], sum(positives.values()))]
        ),
    }
    return report


def recall_at_k(ranked, truths, k: int) -> float:
    """Fraction of queries whose true class is among the first k distinct classes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked, truths = list(ranked), list(truths)
    if not ranked:
        raise EmptyQuerySet("recall@k over an empty query set")
    if len(ranked) != len(truths):
        raise ValueError("one ranking per ground-truth class required")
    hits = 0
    for classes, truth in zip(ranked, truths):
        distinct = list(dict.fromkeys(classes))
        hits += truth in distinct[:k]
    return hits / len(ranked)


# -- JSONL ------------------------------------------------------------------------

def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def load_detections(path) -> list[Detection]:
    return [
        Detection(r["image"], BBox(*r["bbox"]), r["class"], float(r["score"]))
        for r in read_jsonl(path)
    ]


def load_ground_truth(path) -> list[GroundTruth]:
    return [GroundTruth(r["image"], BBox(*r["bbox"]), r["class"]) for r in read_jsonl(path)]
