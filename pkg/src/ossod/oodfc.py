"""Fusion of known-class pseudo-labels with "unknown" detections.

An unknown detection that overlaps a known one (IoU above the gate) is kept
only if its score reaches a per-class threshold driven by how well the
supervised teacher does on that class::

    T_i = clamp(exp(gamma * (AP_i - 1)), 0, 1)

Unknown detections with no such overlap are kept at a fixed base threshold.
Known-class pseudo-labels are never dropped or altered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional

import numpy as np

from .annotations import UNKNOWN_ID, Annotation, AnnotationSet
from .errors import CategoryMismatchError, FusionError, MissingScoreError
from .geometry import ApTable, iou_matrix


@dataclass(frozen=True)
class FusionConfig:
    gamma: float = 1.5
    iou_gate: float = 0.7
    base_unknown_threshold: float = 0.5

    def __post_init__(self):
        if not self.gamma > 0:
            raise FusionError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.iou_gate <= 1.0:
            raise FusionError(f"iou_gate must lie in [0, 1], got {self.iou_gate}")
        if not 0.0 <= self.base_unknown_threshold <= 1.0:
            raise FusionError("base_unknown_threshold must lie in [0, 1]")


ThresholdTable = Dict[int, float]


def dynamic_threshold(ap_i: float, gamma: float) -> float:
    if not 0.0 <= ap_i <= 1.0:
        raise FusionError(f"AP must lie in [0, 1], got {ap_i}")
    if not gamma > 0:
        raise FusionError(f"gamma must be positive, got {gamma}")
    return max(0.0, min(1.0, math.exp(gamma * (ap_i - 1.0))))


def build_threshold_table(
    aps: ApTable, cfg: FusionConfig, category_ids: Optional[Iterable[int]] = None
) -> ThresholdTable:
    """Per-class thresholds; ``category_ids`` lists classes that must be covered."""
    if category_ids is not None:
        missing = sorted(set(category_ids) - set(aps.per_class) - {UNKNOWN_ID})
        if missing:
            raise FusionError(f"AP table has no entry for categories {missing}")
    return {cid: dynamic_threshold(ap, cfg.gamma) for cid, ap in aps.per_class.items()}


def fuse(
    known: AnnotationSet,
    unknown: AnnotationSet,
    thresholds: ThresholdTable,
    cfg: FusionConfig = FusionConfig(),
) -> AnnotationSet:
    """Append qualifying unknown detections to ``known``.

    Appended detections get fresh ids above the largest id in ``known`` (in
    order of their original id) and keep their detector score. The output is
    ordered by annotation id.
    """
    if {c.id: c.name for c in known.categories} != {c.id: c.name for c in unknown.categories}:
        raise CategoryMismatchError("known and unknown sets use different categories")
    if {i.id: i for i in known.images} != {i.id: i for i in unknown.images}:
        raise CategoryMismatchError("known and unknown sets use different image tables")
    for ann in known.annotations:
        if ann.category_id == UNKNOWN_ID:
            raise FusionError(f"known set contains unknown-class annotation {ann.id}")
        if ann.score is None:
            raise MissingScoreError(f"known annotation {ann.id} has no score")
    for ann in unknown.annotations:
        if ann.category_id != UNKNOWN_ID:
            raise FusionError(
                f"unknown set contains category {ann.category_id} (annotation {ann.id})"
            )
        if ann.score is None:
            raise MissingScoreError(f"unknown annotation {ann.id} has no score")

    known_by_image = known.by_image()
    next_id = max((a.id for a in known.annotations), default=0) + 1
    appended: List[Annotation] = []
    for u in sorted(unknown.annotations, key=lambda a: a.id):
        if keep_unknown(u, known_by_image.get(u.image_id, []), thresholds, cfg):
            appended.append(replace(u, id=next_id))
            next_id += 1
    out = sorted(known.annotations, key=lambda a: a.id) + appended
    return known.with_annotations(out)


def keep_unknown(
    u: Annotation, neighbours: List[Annotation], thresholds: ThresholdTable, cfg: FusionConfig
) -> bool:
    """Decide one unknown detection against the known detections on its image."""
    gate_class = None
    if neighbours:
        overlaps = iou_matrix([u.bbox], [k.bbox for k in neighbours])[0]
        best = None
        for k, v in zip(neighbours, overlaps):
            if v <= cfg.iou_gate:
                continue
            if best is None or v > best[0] or (v == best[0] and k.category_id < best[1]):
                best = (v, k.category_id)
        if best is not None:
            gate_class = best[1]
    if gate_class is None:
        return u.score >= cfg.base_unknown_threshold
    if gate_class not in thresholds:
        raise FusionError(f"no threshold for category {gate_class}")
    return u.score >= thresholds[gate_class]
