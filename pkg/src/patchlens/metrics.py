"""Pixel-level localization metrics and their aggregation.

IoU carries no smoothing term; the case of an empty prediction against an
empty ground truth is handled by an explicit override (IoU = F1 = 1), which
rewards correct all-negative predictions on fully pristine images. Precision,
recall, and F1 use eps = 1e-8 in their denominators.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .planes import BinaryMask

EPS = 1.0e-8


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ScoreRow:
    iou: float
    f1: float
    precision: float
    recall: float
    image_id: str = ""
    dataset: str = ""
    perturbation: str = ""


def confusion(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ShapeError(
            f"mask dims differ: {(pred.height, pred.width)} vs {(gt.height, gt.width)}"
        )
    p, g = pred.data, gt.data
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def scores(c: ConfusionCounts, both_empty: bool, eps: float = EPS, *,
           image_id: str = "", dataset: str = "", perturbation: str = "") -> ScoreRow:
    if both_empty:
        iou = f1 = precision = recall = 1.0
    else:
        iou = c.tp / (c.tp + c.fp + c.fn)
        precision = c.tp / (c.tp + c.fp + eps)
        recall = c.tp / (c.tp + c.fn + eps)
        f1 = 2.0 * precision * recall / (precision + recall + eps)
    return ScoreRow(iou=iou, f1=f1, precision=precision, recall=recall,
                    image_id=image_id, dataset=dataset, perturbation=perturbation)


def score_masks(pred: BinaryMask, gt: BinaryMask, *, image_id: str = "",
                dataset: str = "", perturbation: str = "") -> ScoreRow:
    """Confusion counts plus scores in one step; derives the both-empty flag."""
    c = confusion(pred, gt)
    both_empty = pred.is_empty() and gt.is_empty()
    return scores(c, both_empty, image_id=image_id, dataset=dataset,
                  perturbation=perturbation)


_METRICS = ("iou", "f1", "precision", "recall")


@dataclass(frozen=True)
class AggregateRow:
    key: tuple
    count: int
    iou: float
    f1: float
    precision: float
    recall: float


def aggregate(rows, group_by=("dataset", "perturbation")) -> list[AggregateRow]:
    """Arithmetic mean of each metric per group, sorted by group key."""
    groups: dict[tuple, list[ScoreRow]] = {}
    for row in rows:
        key = tuple(getattr(row, k) for k in group_by)
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups):
        members = groups[key]
        means = {m: float(np.mean([getattr(r, m) for r in members])) for m in _METRICS}
        out.append(AggregateRow(key=key, count=len(members), **means))
    return out


def format_table(aggregates: list[AggregateRow], group_by=("dataset", "perturbation")) -> str:
    """Aligned-column text table of per-group means."""
    headers = [*group_by, "n", "iou", "f1", "precision", "recall"]
    body = []
    for agg in aggregates:
        body.append(
            [*map(str, agg.key), str(agg.count)]
            + [f"{getattr(agg, m):.4f}" for m in _METRICS]
        )
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


ROWS_HEADER = "dataset,image,perturbation,iou,f1,precision,recall"


def format_rows(rows) -> str:
    """One machine-readable record per line, stable ordering and formatting."""
    lines = [ROWS_HEADER]
    for r in rows:
        lines.append(
            f"{r.dataset},{r.image_id},{r.perturbation},"
            f"{r.iou:.6f},{r.f1:.6f},{r.precision:.6f},{r.recall:.6f}"
        )
    return "\n".join(lines) + "\n"
