"""Labeled/unlabeled sets, pseudo-labels and predictions.

One JSON shape serves all of them::

    {"images": [{"id", "width", "height", "file_name"}],
     "categories": [{"id", "name"}],
     "annotations": [{"id", "image_id", "category_id", "bbox": [x, y, w, h],
                      "score": float (detections and pseudo-labels only)}]}

Category id 0 is reserved for ``"unknown"``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .errors import (
    AnnotationSyntaxError,
    CategoryMismatchError,
    DanglingReferenceError,
    MissingScoreError,
    SchemaError,
)

UNKNOWN_ID = 0
UNKNOWN_NAME = "unknown"
BBox = Tuple[float, float, float, float]
PathLike = Union[str, os.PathLike]


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    file_name: str = ""


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: BBox
    score: Optional[float] = None

    @property
    def is_detection(self) -> bool:
        return self.score is not None


@dataclass(frozen=True)
class AnnotationSet:
    images: Tuple[ImageInfo, ...] = ()
    categories: Tuple[Category, ...] = ()
    annotations: Tuple[Annotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        validate(self)

    def image(self, image_id: int) -> ImageInfo:
        for info in self.images:
            if info.id == image_id:
                return info
        raise KeyError(image_id)

    @property
    def known_category_ids(self) -> List[int]:
        return sorted(c.id for c in self.categories if c.id != UNKNOWN_ID)

    def by_image(self) -> Dict[int, List[Annotation]]:
        out: Dict[int, List[Annotation]] = {info.id: [] for info in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def with_annotations(self, annotations: Iterable[Annotation]) -> "AnnotationSet":
        return replace(self, annotations=tuple(annotations))


@dataclass(frozen=True)
class ClassStats:
    counts: Dict[int, int]
    percentages: Dict[int, float]
    total: int


def validate(s: AnnotationSet) -> None:
    image_ids = set()
    sizes = {}
    for info in s.images:
        if info.id in image_ids:
            raise SchemaError(f"duplicate image id {info.id}")
        if info.width <= 0 or info.height <= 0:
            raise SchemaError(f"image {info.id} has non-positive size")
        image_ids.add(info.id)
        sizes[info.id] = (info.width, info.height)

    cat_ids = set()
    for cat in s.categories:
        if cat.id in cat_ids:
            raise SchemaError(f"duplicate category id {cat.id}")
        if cat.id < 0:
            raise SchemaError(f"negative category id {cat.id}")
        if cat.id == UNKNOWN_ID and cat.name != UNKNOWN_NAME:
            raise SchemaError(f"category id 0 is reserved for {UNKNOWN_NAME!r}")
        cat_ids.add(cat.id)

    ann_ids = set()
    for ann in s.annotations:
        if ann.id in ann_ids:
            raise SchemaError(f"duplicate annotation id {ann.id}")
        ann_ids.add(ann.id)
        if ann.image_id not in image_ids:
            raise DanglingReferenceError(
                f"annotation {ann.id} references missing image {ann.image_id}"
            )
        if ann.category_id not in cat_ids:
            raise DanglingReferenceError(
                f"annotation {ann.id} references missing category {ann.category_id}"
            )
        x, y, w, h = ann.bbox
        if not (w > 0 and h > 0):
            raise SchemaError(f"annotation {ann.id} has non-positive box size")
        iw, ih = sizes[ann.image_id]
        if x < 0 or y < 0 or x + w > iw or y + h > ih:
            raise SchemaError(
                f"annotation {ann.id} box {list(ann.bbox)} exceeds {iw}x{ih} image"
            )
        if ann.score is not None and not 0.0 <= ann.score <= 1.0:
            raise SchemaError(f"annotation {ann.id} score {ann.score} outside [0, 1]")


# ---------------------------------------------------------------------------
# JSON interchange


def to_dict(s: AnnotationSet) -> dict:
    anns = []
    for a in s.annotations:
        d = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "bbox": list(a.bbox),
        }
        if a.score is not None:
            d["score"] = a.score
        anns.append(d)
    return {
        "images": [
            {"id": i.id, "width": i.width, "height": i.height, "file_name": i.file_name}
            for i in s.images
        ],
        "categories": [{"id": c.id, "name": c.name} for c in s.categories],
        "annotations": anns,
    }


def _require(d: dict, key: str, kinds, where: str):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = d[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise SchemaError(f"{where}: field {key!r} has wrong type")
    return value


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{where}: expected a number")
    if not math.isfinite(value):
        raise SchemaError(f"{where}: non-finite number")
    return value


def from_dict(data) -> AnnotationSet:
    if not isinstance(data, dict):
        raise SchemaError("top level must be an object")
    for key in ("images", "categories", "annotations"):
        if not isinstance(data.get(key), list):
            raise SchemaError(f"missing or non-list {key!r}")
    images = []
    for k, d in enumerate(data["images"]):
        where = f"images[{k}]"
        file_name = d.get("file_name", "") if isinstance(d, dict) else ""
        if not isinstance(file_name, str):
            raise SchemaError(f"{where}: field 'file_name' has wrong type")
        images.append(ImageInfo(
            id=_require(d, "id", int, where),
            width=_require(d, "width", int, where),
            height=_require(d, "height", int, where),
            file_name=file_name,
        ))
    categories = [
        Category(id=_require(d, "id", int, f"categories[{k}]"),
                 name=_require(d, "name", str, f"categories[{k}]"))
        for k, d in enumerate(data["categories"])
    ]
    anns = []
    for k, d in enumerate(data["annotations"]):
        where = f"annotations[{k}]"
        bbox = _require(d, "bbox", list, where)
        if len(bbox) != 4:
            raise SchemaError(f"{where}: bbox must have 4 entries")
        score = d.get("score")
        if score is not None:
            score = float(_number(score, where + ".score"))
        anns.append(Annotation(
            id=_require(d, "id", int, where),
            image_id=_require(d, "image_id", int, where),
            category_id=_require(d, "category_id", int, where),
            bbox=tuple(_number(v, where + ".bbox") for v in bbox),
            score=score,
        ))
    return AnnotationSet(tuple(images), tuple(categories), tuple(anns))


def loads(text: str) -> AnnotationSet:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationSyntaxError(str(exc)) from exc
    return from_dict(data)


def dumps(s: AnnotationSet, indent: Optional[int] = None) -> str:
    # repr-based float formatting in json keeps full precision
    return json.dumps(to_dict(s), indent=indent)


def parse_annotation_set(path: PathLike) -> AnnotationSet:
    return loads(Path(path).read_text(encoding="utf-8"))


def save_annotation_set(s: AnnotationSet, path: PathLike) -> None:
    Path(path).write_text(dumps(s), encoding="utf-8")


# ---------------------------------------------------------------------------
# Operations


def class_frequencies(s: AnnotationSet) -> ClassStats:
    counts = {cid: 0 for cid in s.known_category_ids}
    for ann in s.annotations:
        if ann.category_id != UNKNOWN_ID:
            counts[ann.category_id] += 1
    total = sum(counts.values())
    if total == 0:
        pct = {cid: 0.0 for cid in counts}
    else:
        pct = {cid: 100.0 * n / total for cid, n in counts.items()}
    return ClassStats(counts=counts, percentages=pct, total=total)


def filter_by_confidence(s: AnnotationSet, tau: float) -> AnnotationSet:
    if not 0.0 <= tau <= 1.0:
        raise SchemaError(f"tau must lie in [0, 1], got {tau}")
    kept = []
    for ann in s.annotations:
        if ann.score is None:
            raise MissingScoreError(f"annotation {ann.id} has no score")
        if ann.score >= tau:
            kept.append(ann)
    return s.with_annotations(kept)


def merge_sets(a: AnnotationSet, b: AnnotationSet) -> AnnotationSet:
    """Union of two sets; annotation ids are reissued 1..n, a's first."""
    cats_a = {c.id: c.name for c in a.categories}
    cats_b = {c.id: c.name for c in b.categories}
    if cats_a != cats_b:
        raise CategoryMismatchError("category tables differ")
    images = {i.id: i for i in a.images}
    for info in b.images:
        if info.id in images and images[info.id] != info:
            raise SchemaError(f"image {info.id} differs between the two sets")
        images.setdefault(info.id, info)
    anns = [
        replace(ann, id=k)
        for k, ann in enumerate(a.annotations + b.annotations, start=1)
    ]
    return AnnotationSet(tuple(images.values()), a.categories, tuple(anns))
