"""Prototype detector for the shape world.

Proposals are connected components of above-background pixels. Each proposal
is described by five numbers (foreground chromaticity r, g, b, the box shape
``w / (w + h)`` and the fraction of the box covered by foreground) and scored
against one centroid per known class::

    logit_c = (-dist_c + prior_strength * log(support_c / total)) / temperature

The support term lets class frequency bias the decision, the same failure
mode large detectors show on long-tailed data. With ``open_set`` a proposal
whose nearest centroid lies beyond ``delta`` is reported as category 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .annotations import UNKNOWN_ID, Annotation, AnnotationSet
from .ema import ParamVector
from .errors import ModelError
from .geometry import Box
from .raster import RasterImage

N_FEATURES = 5
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class DetectorModel:
    class_ids: Tuple[int, ...]
    centroids: np.ndarray  # (K, 5)
    support: np.ndarray  # (K,) accumulated example weight per class
    temperature: float = 0.05
    delta: float = 0.15
    prior_strength: float = 0.08
    bg_threshold: float = 45.0
    min_area: int = 6

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float64, copy=True)
        s = np.array(self.support, dtype=np.float64, copy=True)
        k = len(self.class_ids)
        if c.shape != (k, N_FEATURES) or s.shape != (k,):
            raise ModelError("need exactly one centroid and support value per class")
        if len(set(self.class_ids)) != k or any(cid < 1 for cid in self.class_ids):
            raise ModelError("class ids must be unique known ids")
        if not self.delta > 0 or not self.temperature > 0:
            raise ModelError("delta and temperature must be positive")
        if np.any(s <= 0):
            raise ModelError("class support must be positive")
        c.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "class_ids", tuple(int(v) for v in self.class_ids))
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "support", s)

    def __eq__(self, other):
        if not isinstance(other, DetectorModel):
            return NotImplemented
        return self.to_params() == other.to_params() and self.class_ids == other.class_ids

    @property
    def layout_tag(self) -> str:
        ids = ",".join(str(c) for c in self.class_ids)
        return f"centroid-detector/v1 classes={ids} features={N_FEATURES}"

    def to_params(self) -> ParamVector:
        tail = [self.temperature, self.delta, self.prior_strength, self.bg_threshold,
                float(self.min_area)]
        return ParamVector(
            np.concatenate([self.centroids.ravel(), self.support, tail]), self.layout_tag
        )

    def with_params(self, p: ParamVector) -> "DetectorModel":
        if p.layout_tag != self.layout_tag:
            raise ModelError(f"layout mismatch: {p.layout_tag!r}")
        k = len(self.class_ids)
        v = p.values
        c = v[: k * N_FEATURES].reshape(k, N_FEATURES)
        s = v[k * N_FEATURES: k * N_FEATURES + k]
        t, d, ps, bg, ma = v[k * N_FEATURES + k:]
        return DetectorModel(self.class_ids, c, s, float(t), float(d), float(ps), float(bg),
                             int(round(ma)))

    @property
    def log_prior(self) -> np.ndarray:
        return np.log(self.support / self.support.sum())


@dataclass(frozen=True)
class DetectionResult:
    box: Box
    class_scores: Tuple[float, ...]
    category_id: int
    confidence: float
    distance: float = 0.0


@dataclass(frozen=True, eq=False)
class Candidates:
    """Proposal boxes and their features for one image."""

    boxes: np.ndarray  # (n, 4)
    features: np.ndarray  # (n, 5)

    def __len__(self):
        return len(self.boxes)


# ---------------------------------------------------------------------------
# Features and proposals


def background_level(pixels: np.ndarray) -> np.ndarray:
    """Per-channel median of the whole image, a background estimate."""
    return np.median(pixels.reshape(-1, 3), axis=0).astype(np.float64)


def box_features(
    pixels: np.ndarray, box: Sequence[float], bg_threshold: float,
    background: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Chromaticity is taken after subtracting the background level, which
    makes it invariant to alpha-blending an object over a similar background."""
    if background is None:
        background = background_level(pixels)
    x, y, w, h = (int(round(v)) for v in box)
    patch = pixels[y:y + h, x:x + w].astype(np.float64)
    fg = patch.max(axis=2) > bg_threshold
    n = int(fg.sum())
    color = patch[fg].mean(axis=0) if n else patch.reshape(-1, 3).mean(axis=0)
    color = np.maximum(color - background, 0.0)
    chroma = color / color.sum() if color.sum() > 1e-9 else np.full(3, 1 / 3)
    return np.array([chroma[0], chroma[1], chroma[2], w / (w + h), n / (w * h)])


def propose(img: RasterImage, bg_threshold: float, min_area: int) -> Candidates:
    pixels = img.pixels
    mask = pixels.max(axis=2) > bg_threshold
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return Candidates(np.zeros((0, 4)), np.zeros((0, N_FEATURES)))
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    boxes, feats = [], []
    bg = background_level(pixels)
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if areas[k] < min_area:
            continue
        ys, xs = sl
        box = (xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start)
        boxes.append(box)
        feats.append(box_features(pixels, box, bg_threshold, bg))
    if not boxes:
        return Candidates(np.zeros((0, 4)), np.zeros((0, N_FEATURES)))
    return Candidates(np.asarray(boxes, dtype=np.float64), np.asarray(feats))


# ---------------------------------------------------------------------------
# Inference


def distances(model: DetectorModel, feats: np.ndarray) -> np.ndarray:
    diff = feats[:, None, :] - model.centroids[None, :, :]
    return np.sqrt(np.sum(diff ** 2, axis=2))


def class_scores(model: DetectorModel, dist: np.ndarray) -> np.ndarray:
    logits = (-dist + model.prior_strength * model.log_prior[None, :]) / model.temperature
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def unknown_confidence(d: float, delta: float) -> float:
    return float(min(1.0, max(0.0, 1.0 - np.exp(-(d - delta) / delta))))


def classify(model: DetectorModel, cands: Candidates, open_set: bool = False) -> List[DetectionResult]:
    if len(cands) == 0:
        return []
    dist = distances(model, cands.features)
    probs = class_scores(model, dist)
    out = []
    for k in range(len(cands)):
        best = int(np.argmax(probs[k]))
        dmin = float(dist[k].min())
        if open_set and dmin > model.delta:
            cid, conf = UNKNOWN_ID, unknown_confidence(dmin, model.delta)
        else:
            cid, conf = model.class_ids[best], float(probs[k, best])
        out.append(DetectionResult(
            box=Box(*(float(v) for v in cands.boxes[k])),
            class_scores=tuple(float(p) for p in probs[k]),
            category_id=cid,
            confidence=conf,
            distance=dmin,
        ))
    return out


def predict(model: DetectorModel, img: RasterImage, open_set: bool = False) -> List[DetectionResult]:
    return classify(model, propose(img, model.bg_threshold, model.min_area), open_set)


# ---------------------------------------------------------------------------
# Training


def annotation_examples(split, bg_threshold: float, include_unknown: bool = False):
    """Features, category ids and weights (score, or 1 for ground truth)."""
    feats, labels, weights = [], [], []
    bgs: Dict[int, np.ndarray] = {}
    for ann in split.annotations.annotations:
        if ann.category_id == UNKNOWN_ID and not include_unknown:
            continue
        pixels = split.images[ann.image_id].pixels
        if ann.image_id not in bgs:
            bgs[ann.image_id] = background_level(pixels)
        feats.append(box_features(pixels, ann.bbox, bg_threshold, bgs[ann.image_id]))
        labels.append(ann.category_id)
        weights.append(1.0 if ann.score is None else ann.score)
    return (np.asarray(feats, dtype=np.float64).reshape(-1, N_FEATURES),
            np.asarray(labels, dtype=np.int64), np.asarray(weights, dtype=np.float64))


def fit_supervised(
    *splits,
    margin: float = 1.5,
    temperature: float = 0.05,
    prior_strength: float = 0.08,
    bg_threshold: float = 45.0,
    min_area: int = 6,
) -> DetectorModel:
    """Weighted per-class mean features over all annotations of all ``splits``.

    ``delta`` is ``margin`` times the largest distance of any example to its
    own class centroid.
    """
    if not splits:
        raise ModelError("fit_supervised needs at least one split")
    class_ids = tuple(splits[0].annotations.known_category_ids)
    parts = [annotation_examples(s, bg_threshold) for s in splits]
    feats = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    weights = np.concatenate([p[2] for p in parts])
    centroids, support, spread = [], [], 0.0
    for cid in class_ids:
        sel = labels == cid
        if not sel.any() or weights[sel].sum() <= 0:
            raise ModelError(f"class {cid} has no training examples")
        w = weights[sel]
        c = (w[:, None] * feats[sel]).sum(axis=0) / w.sum()
        if sel.sum() == 1:
            c = feats[sel][0]
        centroids.append(c)
        support.append(w.sum())
        spread = max(spread, float(np.sqrt(((feats[sel] - c) ** 2).sum(axis=1)).max()))
    delta = margin * spread if spread > 0 else 1e-3
    return DetectorModel(class_ids, np.asarray(centroids), np.asarray(support), temperature,
                         delta, prior_strength, bg_threshold, min_area)


def update_from_examples(
    model: DetectorModel, feats: np.ndarray, labels: np.ndarray, weights: np.ndarray,
    weight: float,
) -> DetectorModel:
    """Running-mean step of each class centroid toward its batch mean."""
    stray = set(labels.tolist()) - set(model.class_ids) - {UNKNOWN_ID}
    if stray:
        raise ModelError(f"batch uses categories {sorted(stray)} absent from the model")
    if weight == 0 or len(labels) == 0:
        return model
    centroids = model.centroids.copy()
    support = model.support.copy()
    changed = False
    for k, cid in enumerate(model.class_ids):
        sel = labels == cid
        if not sel.any():
            continue
        w = weights[sel]
        m = float(w.sum()) * weight
        if m <= 0:
            continue
        mean = (w[:, None] * feats[sel]).sum(axis=0) / w.sum()
        centroids[k] += m / (support[k] + m) * (mean - centroids[k])
        support[k] += m
        changed = True
    if not changed:
        return model
    return replace(model, centroids=centroids, support=support)


def update_model(model: DetectorModel, batch, weight: float) -> DetectorModel:
    """Move centroids toward the batch's per-class means; category 0 is ignored."""
    feats, labels, weights = annotation_examples(batch, model.bg_threshold)
    return update_from_examples(model, feats, labels, weights, weight)


def to_annotation_set(
    results_by_image: Dict[int, List[DetectionResult]], template: AnnotationSet,
    keep_unknown: bool = True,
) -> AnnotationSet:
    """Predictions as a scored annotation set over ``template``'s image table."""
    anns = []
    for image_id in sorted(results_by_image):
        for r in results_by_image[image_id]:
            if r.category_id == UNKNOWN_ID and not keep_unknown:
                continue
            anns.append(Annotation(len(anns) + 1, image_id, r.category_id, tuple(r.box),
                                   r.confidence))
    return template.with_annotations(anns)
