"""Evaluation suite: accuracy/RMSE, per-label accuracy, grounding metrics.

Grounding precision weights each region score by the exact fraction of the
region's area that lies inside the union of ground-truth boxes; average
precision ranks scored regions corpus-wide and matches them greedily to
ground truth at a fixed IoU threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import Box, iou

__all__ = [
    "MetricsError",
    "EvalReport",
    "GroundingItem",
    "GroundingEval",
    "accuracy_rmse",
    "per_label_accuracy",
    "rect_union_intersection",
    "box_precision",
    "ground_p",
    "average_precision",
    "build_eval_report",
]


class MetricsError(ValueError):
    pass


@dataclass
class EvalReport:
    """Headline numbers for one evaluated id set."""

    accuracy: float
    rmse: float
    per_label: dict[int, float]
    per_label_support: dict[int, int]
    n_examples: int
    grounding: dict | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "rmse": self.rmse,
            "per_label": {str(k): v for k, v in sorted(self.per_label.items())},
            "per_label_support": {str(k): v for k, v in sorted(self.per_label_support.items())},
            "n_examples": self.n_examples,
            "grounding": self.grounding,
            "provenance": self.provenance,
        }


def accuracy_rmse(pred_labels: Sequence[int], pred_values: Sequence[float],
                  true_labels: Sequence[int]) -> tuple[float, float]:
    """Exact-match accuracy (%) over rounded labels and RMSE over raw values.

    RMSE is computed on the fractional predictions before rounding.
    """
    n = len(true_labels)
    if n == 0:
        raise MetricsError("accuracy_rmse: empty inputs")
    if len(pred_labels) != n or len(pred_values) != n:
        raise MetricsError("accuracy_rmse: misaligned inputs")
    hits = sum(1 for p, t in zip(pred_labels, true_labels) if int(p) == int(t))
    acc = 100.0 * hits / n
    se = sum((float(v) - float(t)) ** 2 for v, t in zip(pred_values, true_labels))
    return acc, math.sqrt(se / n)


def per_label_accuracy(pred_labels: Sequence[int],
                       true_labels: Sequence[int]) -> dict[int, float]:
    """Accuracy (%) within each true-label bucket; zero-support labels omitted."""
    if not true_labels:
        raise MetricsError("per_label_accuracy: empty inputs")
    if len(pred_labels) != len(true_labels):
        raise MetricsError("per_label_accuracy: misaligned inputs")
    support: dict[int, int] = {}
    hits: dict[int, int] = {}
    for p, t in zip(pred_labels, true_labels):
        t = int(t)
        support[t] = support.get(t, 0) + 1
        if int(p) == t:
            hits[t] = hits.get(t, 0) + 1
    return {t: 100.0 * hits.get(t, 0) / n for t, n in sorted(support.items())}


def adjacent_label_gap(per_label: dict[int, float]) -> float:
    """Mean |acc(k) - acc(k+1)| over adjacent supported labels."""
    labels = sorted(per_label)
    gaps = [abs(per_label[a] - per_label[b])
            for a, b in zip(labels, labels[1:]) if b == a + 1]
    if not gaps:
        return 0.0
    return sum(gaps) / len(gaps)


def rect_union_intersection(box: Box, gt_boxes: Sequence[Box]) -> float:
    """Exact area of ``box`` ∩ (∪ gt_boxes) by coordinate compression.

    Each ground-truth box is clipped to ``box``; the clipped corners induce
    a grid whose cells are either fully covered or fully uncovered, so the
    covered area is an exact sum of cell areas (no inclusion-exclusion, no
    raster resolution parameter).
    """
    clipped = []
    for gt in gt_boxes:
        inter = box.intersect(gt)
        if inter is not None:
            clipped.append(inter)
    if not clipped:
        return 0.0
    xs = sorted({c.x1 for c in clipped} | {c.x2 for c in clipped})
    ys = sorted({c.y1 for c in clipped} | {c.y2 for c in clipped})
    area = 0.0
    for i in range(len(xs) - 1):
        cx = 0.5 * (xs[i] + xs[i + 1])
        for j in range(len(ys) - 1):
            cy = 0.5 * (ys[j] + ys[j + 1])
            for c in clipped:
                if c.x1 <= cx <= c.x2 and c.y1 <= cy <= c.y2:
                    area += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j])
                    break
    return area


def box_precision(box: Box, gt_boxes: Sequence[Box]) -> float:
    """Fraction of the box's own area inside the ground-truth union.

    Degenerate (zero-area) boxes have precision 0 by convention.
    """
    a = box.area()
    if a <= 0.0:
        return 0.0
    return rect_union_intersection(box, gt_boxes) / a


@dataclass
class GroundingItem:
    """One scored example: proposal boxes, their scores, ground-truth boxes."""

    boxes: list[Box]
    scores: list[float]
    gt_boxes: list[Box]

    def __post_init__(self):
        if len(self.boxes) != len(self.scores):
            raise MetricsError("GroundingItem: one score per box required")
        if any(s < 0.0 for s in self.scores):
            raise MetricsError("GroundingItem: scores must be non-negative")


@dataclass
class GroundingEval:
    """Per-item weighted sums and the corpus-level grounding precision."""

    per_item_weighted: list[float]      # Σ_i s_i·p_i per item
    per_item_total: list[float]         # Σ_i s_i per item
    corpus: float | None                # Σ weighted / Σ total, None if undefined

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus,
            "weighted_sum": sum(self.per_item_weighted),
            "score_sum": sum(self.per_item_total),
            "n_items": len(self.per_item_total),
        }


def ground_p(items: Sequence[GroundingItem]) -> GroundingEval:
    """Proportion of total predicted score mass lying inside ground truth.

    Undefined (None) when every item's predicted score mass is zero; callers
    must report that rather than substitute 0.
    """
    weighted: list[float] = []
    totals: list[float] = []
    for item in items:
        precisions = [box_precision(b, item.gt_boxes) for b in item.boxes]
        weighted.append(sum(s * p for s, p in zip(item.scores, precisions)))
        totals.append(sum(item.scores))
    denom = sum(totals)
    corpus = None if denom <= 0.0 else sum(weighted) / denom
    return GroundingEval(weighted, totals, corpus)


def average_precision(items: Sequence[GroundingItem], threshold: float) -> float | None:
    """All-points average precision at one IoU matching threshold.

    Proposals are ranked corpus-wide by (score desc, item index, proposal
    index); each is greedily matched to the highest-IoU unmatched ground
    truth of its own item at IoU >= threshold.  Undefined (None) when the
    corpus contains no ground-truth boxes.
    """
    if not 0.0 < threshold <= 1.0:
        raise MetricsError(f"average_precision: threshold {threshold} not in (0, 1]")
    n_gt = sum(len(item.gt_boxes) for item in items)
    if n_gt == 0:
        return None
    entries = []
    for m, item in enumerate(items):
        for i, (b, s) in enumerate(zip(item.boxes, item.scores)):
            entries.append((-float(s), m, i, b))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    matched: dict[int, set[int]] = {m: set() for m in range(len(items))}
    tps = np.zeros(len(entries))
    for rank, (_, m, i, b) in enumerate(entries):
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(items[m].gt_boxes):
            if j in matched[m]:
                continue
            v = iou(b, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= threshold:
            matched[m].add(best_j)
            tps[rank] = 1.0
    cum_tp = np.cumsum(tps)
    ranks = np.arange(1, len(entries) + 1)
    recall = cum_tp / n_gt
    precision = cum_tp / ranks
    # precision envelope from the right, then sum rectangle areas
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def build_eval_report(pred_labels: Sequence[int], pred_values: Sequence[float],
                      true_labels: Sequence[int], provenance: dict | None = None,
                      grounding: dict | None = None) -> EvalReport:
    """Assemble an EvalReport, re-deriving the headline numbers as a self-check."""
    acc, rmse = accuracy_rmse(pred_labels, pred_values, true_labels)
    # one-line recomputation oracle guarding the report path
    assert abs(acc - 100.0 * float(np.mean(np.array(pred_labels) == np.array(true_labels)))) < 1e-9
    assert abs(rmse - float(np.sqrt(np.mean((np.asarray(pred_values, dtype=float)
                                             - np.asarray(true_labels, dtype=float)) ** 2)))) < 1e-9
    support: dict[int, int] = {}
    for t in true_labels:
        support[int(t)] = support.get(int(t), 0) + 1
    return EvalReport(
        accuracy=acc,
        rmse=rmse,
        per_label=per_label_accuracy(pred_labels, true_labels),
        per_label_support=dict(sorted(support.items())),
        n_examples=len(true_labels),
        grounding=grounding,
        provenance=provenance or {},
    )
