"""Rating and segmentation metrics: confusion matrices, greedy IoU matching,
count tables and loop trajectories.

Instance matching is greedy in descending point-set IoU (the forestry
convention); ties break on the lower ground-truth id, then the lower
predicted id, so reports are reproducible. Unmatched ground-truth instances
score IoU 0 and count against the detection rate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clusters import ClusterSet

N_CLASSES = 3
DETECTION_IOU = 0.5
MATCHING_RULE = "greedy-best-iou/v1"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.counts is None:
            self.counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_CLASSES, N_CLASSES) or (self.counts < 0).any():
            raise ValueError("confusion matrix must be 3x3 and non-negative")

    @classmethod
    def from_labels(cls, true: np.ndarray, predicted: np.ndarray) -> "ConfusionMatrix":
        cm = cls()
        for t, p in zip(np.asarray(true, dtype=int), np.asarray(predicted, dtype=int)):
            cm.counts[t, p] += 1
        return cm

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, true: int, predicted: int) -> None:
        self.counts[true, predicted] += 1


def accuracy_metrics(cm: ConfusionMatrix) -> tuple[float, float]:
    """(accuracy, weighted accuracy).

    Weighted accuracy is the mean per-class recall over classes that actually
    occur, i.e. accuracy as if every class had the same weight.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    accuracy = float(np.trace(cm.counts) / cm.total)
    recalls = []
    for k in range(N_CLASSES):
        row = cm.counts[k].sum()
        if row > 0:
            recalls.append(cm.counts[k, k] / row)
    return accuracy, float(np.mean(recalls))


@dataclass
class MatchReport:
    pairs: list[tuple[int, int | None, float]] = field(default_factory=list)
    rule: str = MATCHING_RULE

    @property
    def detection_rate(self) -> float:
        if not self.pairs:
            return 0.0
        hits = sum(1 for _, pred, iou in self.pairs
                   if pred is not None and iou >= DETECTION_IOU)
        return hits / len(self.pairs)

    @property
    def mean_iou(self) -> float:
        if not self.pairs:
            return 0.0
        return float(np.mean([iou for _, _, iou in self.pairs]))

    def summary(self) -> dict:
        return {
            "rule": self.rule,
            "gt_instances": len(self.pairs),
            "matched": sum(1 for _, p, _ in self.pairs if p is not None),
            "detection_rate_iou50": self.detection_rate,
            "mean_iou": self.mean_iou,
        }


def point_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.intersect1d(a, b, assume_unique=True).size
    if inter == 0:
        return 0.0
    return inter / (a.size + b.size - inter)


def match_instances(gt: ClusterSet, pred: ClusterSet) -> MatchReport:
    """Greedily match predictions to ground truth in descending IoU order.

    Each side matches at most once. Ties: lower gt id first, then lower
    predicted id. Ground-truth instances left unmatched get IoU 0.
    """
    gt_ids = gt.ids()
    pred_ids = pred.ids()
    scored = []
    for g in gt_ids:
        for q in pred_ids:
            iou = point_iou(gt[g].point_indices, pred[q].point_indices)
            if iou > 0.0:
                scored.append((-iou, g, q))
    scored.sort()

    gt_match: dict[int, tuple[int, float]] = {}
    used_pred: set[int] = set()
    for neg_iou, g, q in scored:
        if g in gt_match or q in used_pred:
            continue
        gt_match[g] = (q, -neg_iou)
        used_pred.add(q)

    report = MatchReport()
    for g in gt_ids:
        if g in gt_match:
            q, iou = gt_match[g]
            report.pairs.append((g, q, iou))
        else:
            report.pairs.append((g, None, 0.0))
    return report


def count_report(pred: ClusterSet, ratings: dict[int, int], gt_count: int,
                 category: str = "") -> dict:
    """Predicted-vs-truth instance counts after Single-filtering.

    ``ratings`` maps predicted cluster id to its rating class; only clusters
    rated Single survive into the predicted count.
    """
    from .ratings import RatingClass

    kept = [cid for cid in pred.ids()
            if ratings.get(cid) == int(RatingClass.SINGLE)]
    return {
        "category": category,
        "predicted": len(kept),
        "ground_truth": int(gt_count),
        "ratio": len(kept) / gt_count if gt_count else 0.0,
    }


def write_report(path: str | Path, match: MatchReport,
                 counts: list[dict] | None = None,
                 extra: dict | None = None) -> None:
    """Emit summary.json + metrics.csv (long format, plot-ready)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    summary = {"match": match.summary()}
    if counts:
        summary["counts"] = counts
    if extra:
        summary.update(extra)
    (path / "summary.json").write_text(json.dumps(summary, indent=2))
    with open(path / "instance_iou.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["gt_id", "pred_id", "iou"])
        for g, q, iou in match.pairs:
            writer.writerow([g, "" if q is None else q, f"{iou:.6f}"])
