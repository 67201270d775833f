"""Box geometry, greedy detection matching and AP50-style evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .annotations import UNKNOWN_ID, AnnotationSet
from .errors import CategoryMismatchError, MissingScoreError, SchemaError


class Box(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return float(inter / union)


def iou_matrix(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]]) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    A = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    B = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(A[:, None, 0], B[None, :, 0])
    y1 = np.maximum(A[:, None, 1], B[None, :, 1])
    x2 = np.minimum(A[:, None, 0] + A[:, None, 2], B[None, :, 0] + B[None, :, 2])
    y2 = np.minimum(A[:, None, 1] + A[:, None, 3], B[None, :, 1] + B[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = (A[:, 2] * A[:, 3])[:, None] + (B[:, 2] * B[:, 3])[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def match_detections(
    gts: Sequence[Sequence[float]],
    dets: Sequence[Tuple[Sequence[float], float]],
    iou_thresh: float,
    det_ids: Optional[Sequence[int]] = None,
) -> List[Tuple[int, Optional[int]]]:
    """Greedy score-ordered matching of detections to ground truth.

    Returns ``(det_index, gt_index or None)`` in processing order: score
    descending, ties by ``det_ids`` (list position when omitted). Each
    detection takes the still-unmatched GT with the highest IoU at or above
    ``iou_thresh``; equal IoUs go to the lower GT index.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    if det_ids is None:
        det_ids = range(len(dets))
    order = sorted(range(len(dets)), key=lambda k: (-dets[k][1], det_ids[k]))
    overlaps = iou_matrix([d[0] for d in dets], gts) if gts and dets else None
    taken = np.zeros(len(gts), dtype=bool)
    out: List[Tuple[int, Optional[int]]] = []
    for k in order:
        best, best_iou = None, iou_thresh
        if overlaps is not None:
            for g in range(len(gts)):
                v = overlaps[k, g]
                if not taken[g] and v >= best_iou and (best is None or v > best_iou):
                    best, best_iou = g, v
        if best is not None:
            taken[best] = True
        out.append((k, best))
    return out


def average_precision(
    gt: AnnotationSet, pred: AnnotationSet, category: int, iou_thresh: float = 0.5
) -> float:
    if category == UNKNOWN_ID:
        raise SchemaError("AP is defined for known categories only")
    gts_by_image: Dict[int, list] = {}
    npos = 0
    for ann in gt.annotations:
        if ann.category_id == category:
            gts_by_image.setdefault(ann.image_id, []).append(ann.bbox)
            npos += 1
    dets_by_image: Dict[int, list] = {}
    for ann in pred.annotations:
        if ann.category_id != category:
            continue
        if ann.score is None:
            raise MissingScoreError(f"prediction {ann.id} has no score")
        dets_by_image.setdefault(ann.image_id, []).append(ann)
    if npos == 0:
        return 0.0

    records = []  # (score, annotation id, is_tp)
    for image_id, dets in dets_by_image.items():
        matches = match_detections(
            gts_by_image.get(image_id, []),
            [(d.bbox, d.score) for d in dets],
            iou_thresh,
            det_ids=[d.id for d in dets],
        )
        for k, g in matches:
            records.append((dets[k].score, dets[k].id, g is not None))
    if not records:
        return 0.0
    records.sort(key=lambda r: (-r[0], r[1]))
    # Exact rational sum, so the result is the correctly rounded AP. Recall
    # only moves at true positives, each by 1/npos, weighted by the best
    # precision at that rank or later.
    precision, tp = [], 0
    for rank, (_, _, hit) in enumerate(records, start=1):
        tp += hit
        precision.append(Fraction(tp, rank))
    area, best = Fraction(0), Fraction(0)
    for rank in range(len(records) - 1, -1, -1):
        best = max(best, precision[rank])
        if records[rank][2]:
            area += best
    return float(area / npos)


@dataclass(frozen=True)
class ApTable:
    per_class: Dict[int, float]
    map: float

    @classmethod
    def from_per_class(cls, per_class: Dict[int, float]) -> "ApTable":
        per_class = dict(sorted(per_class.items()))
        m = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return cls(per_class=per_class, map=m)

    def to_dict(self) -> dict:
        return {"per_class": {str(k): v for k, v in self.per_class.items()}, "map": self.map}

    @classmethod
    def from_dict(cls, d: dict) -> "ApTable":
        try:
            per_class = {int(k): float(v) for k, v in d["per_class"].items()}
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise SchemaError(f"malformed AP report: {exc}") from exc
        for k, v in per_class.items():
            if not 0.0 <= v <= 1.0:
                raise SchemaError(f"AP for category {k} outside [0, 1]")
        return cls.from_per_class(per_class)

    def format_table(self, names: Optional[Dict[int, str]] = None) -> str:
        names = names or {}
        lines = [f"{'id':>4}  {'category':<24} {'AP50':>7}"]
        for cid, ap in self.per_class.items():
            lines.append(f"{cid:>4}  {names.get(cid, ''):<24} {ap:7.4f}")
        lines.append(f"{'':>4}  {'mAP':<24} {self.map:7.4f}")
        return "\n".join(lines)


def _known_table(s: AnnotationSet) -> Dict[int, str]:
    return {c.id: c.name for c in s.categories if c.id != UNKNOWN_ID}


def evaluate(gt: AnnotationSet, pred: AnnotationSet, iou_thresh: float = 0.5) -> ApTable:
    """Per-class AP and mAP over known categories present in ``gt``.

    Category-0 predictions are ignored; classes without GT instances are
    left out of both the table and the mean.
    """
    if _known_table(gt) != _known_table(pred):
        raise CategoryMismatchError("ground truth and predictions use different categories")
    present = sorted({a.category_id for a in gt.annotations if a.category_id != UNKNOWN_ID})
    return ApTable.from_per_class(
        {cid: average_precision(gt, pred, cid, iou_thresh) for cid in present}
    )


def save_ap_report(table: ApTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table.to_dict(), fh, indent=2)


def load_ap_report(path) -> ApTable:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"AP report is not valid JSON: {exc}") from exc
    return ApTable.from_dict(data)
