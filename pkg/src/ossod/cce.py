"""Class-balanced foreground pasting.

Ground-truth box crops from labeled images form a per-class library. The
library is resampled so every class holds ``round(f_target)`` segments,
``f_target`` being the mean class count, and the balanced segments are then
alpha-blended into randomly chosen unlabeled images at random positions.
Each paste becomes an annotation with a fixed synthetic confidence.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import raster
from .annotations import UNKNOWN_ID, Annotation, AnnotationSet, Category, ImageInfo
from .errors import LibraryError, RasterError
from .geometry import Box
from .raster import RasterImage

log = logging.getLogger(__name__)

ImageLoader = Callable[[int], RasterImage]


@dataclass(frozen=True)
class ForegroundSegment:
    crop: RasterImage
    category_id: int
    source_image_id: int
    source_bbox: Box
    flipped: bool = False

    def __post_init__(self):
        if self.category_id < 1:
            raise LibraryError("segments must belong to a known category")
        _, _, w, h = self.source_bbox
        if (self.crop.width, self.crop.height) != (int(round(w)), int(round(h))):
            raise LibraryError("crop size does not match its source box")


@dataclass(frozen=True)
class ForegroundLibrary:
    segments: Dict[int, Tuple[ForegroundSegment, ...]]
    categories: Tuple[Category, ...]

    @property
    def frequencies(self) -> Dict[int, int]:
        return {c: len(segs) for c, segs in sorted(self.segments.items())}

    @property
    def f_target(self) -> float:
        present = [n for n in self.frequencies.values() if n > 0]
        return sum(present) / len(present) if present else 0.0

    @property
    def alphas(self) -> Dict[int, float]:
        ft = self.f_target
        return {c: ft / n for c, n in self.frequencies.items() if n > 0}

    @property
    def target_count(self) -> int:
        return round_half_up(self.f_target)

    def __len__(self):
        return sum(len(s) for s in self.segments.values())

    def flat(self) -> List[ForegroundSegment]:
        return [s for _, segs in sorted(self.segments.items()) for s in segs]


@dataclass(frozen=True)
class SynthesisConfig:
    beta: float = 0.5
    synthetic_score: float = 0.8
    placements_per_image: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise LibraryError("beta must lie in [0, 1]")
        if not 0.0 <= self.synthetic_score <= 1.0:
            raise LibraryError("synthetic_score must lie in [0, 1]")
        if self.placements_per_image < 1:
            raise LibraryError("placements_per_image must be positive")


@dataclass(frozen=True)
class SynthesisResult:
    annotations: AnnotationSet
    images: Dict[int, RasterImage]
    skipped: int = 0


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_library(labeled: AnnotationSet, image_loader: ImageLoader) -> ForegroundLibrary:
    """One segment per ground-truth annotation of a known class."""
    segments: Dict[int, List[ForegroundSegment]] = {c: [] for c in labeled.known_category_ids}
    cache: Dict[int, RasterImage] = {}
    for ann in labeled.annotations:
        if ann.category_id == UNKNOWN_ID:
            continue
        if ann.image_id not in cache:
            try:
                cache[ann.image_id] = image_loader(ann.image_id)
            except (OSError, KeyError) as exc:
                raise LibraryError(f"cannot load image {ann.image_id}: {exc}") from exc
        img = cache[ann.image_id]
        box = Box(*(int(round(v)) for v in ann.bbox))
        try:
            piece = raster.crop(img, box)
        except RasterError as exc:
            raise LibraryError(f"annotation {ann.id}: {exc}") from exc
        segments[ann.category_id].append(
            ForegroundSegment(piece, ann.category_id, ann.image_id, box)
        )
    return ForegroundLibrary({c: tuple(s) for c, s in segments.items()}, labeled.categories)


def balance_library(lib: ForegroundLibrary, seed: int) -> ForegroundLibrary:
    """Resample every non-empty class to ``round(f_target)`` segments.

    Classes above target keep a uniform subset (without replacement, original
    order). Classes below keep all originals plus duplicates drawn with
    replacement, each duplicate flipped horizontally with probability 1/2.
    """
    if len(lib) == 0:
        raise LibraryError("cannot balance an empty library")
    n = lib.target_count
    out: Dict[int, Tuple[ForegroundSegment, ...]] = {}
    for cid, segs in sorted(lib.segments.items()):
        if not segs:
            out[cid] = ()
            continue
        rng = np.random.default_rng([seed, cid])
        if len(segs) >= n:
            keep = np.sort(rng.choice(len(segs), size=n, replace=False)) if len(segs) > n \
                else np.arange(n)
            out[cid] = tuple(segs[k] for k in keep)
            continue
        extra = rng.integers(0, len(segs), size=n - len(segs))
        flips = rng.integers(0, 2, size=n - len(segs)).astype(bool)
        dup = []
        for k, flip in zip(extra, flips):
            s = segs[k]
            if flip:
                s = replace(s, crop=raster.hflip(s.crop), flipped=not s.flipped)
            dup.append(s)
        out[cid] = tuple(segs) + tuple(dup)
    return ForegroundLibrary(out, lib.categories)


def synthesize(
    lib: ForegroundLibrary,
    unlabeled: AnnotationSet,
    image_loader: ImageLoader,
    cfg: SynthesisConfig = SynthesisConfig(),
    first_image_id: Optional[int] = None,
) -> SynthesisResult:
    """Paste every library segment into a randomly chosen unlabeled image.

    Segments are shuffled and grouped ``placements_per_image`` at a time; each
    group lands on one unlabeled image. Random streams are derived from
    ``(seed, group)`` and ``(seed, segment)`` so the result does not depend on
    processing order. Annotations already present on a chosen unlabeled image
    are carried over next to the synthetic ones.
    """
    if not unlabeled.images:
        raise LibraryError("no unlabeled images to paste into")
    segments = lib.flat()
    order = np.random.default_rng([cfg.seed, 0]).permutation(len(segments))
    sizes = np.array([(i.width, i.height) for i in unlabeled.images])

    usable, skipped = [], 0
    for k in order:
        s = segments[k]
        if np.any((sizes[:, 0] >= s.crop.width) & (sizes[:, 1] >= s.crop.height)):
            usable.append(int(k))
        else:
            skipped += 1
    if skipped:
        log.warning("%d segment(s) larger than every unlabeled image were skipped", skipped)

    groups: List[List[int]] = []
    for start in range(0, len(usable), cfg.placements_per_image):
        group = usable[start:start + cfg.placements_per_image]
        w = max(segments[k].crop.width for k in group)
        h = max(segments[k].crop.height for k in group)
        if np.any((sizes[:, 0] >= w) & (sizes[:, 1] >= h)):
            groups.append(group)
        else:
            groups.extend([k] for k in group)

    next_image = first_image_id
    if next_image is None:
        next_image = max((i.id for i in unlabeled.images), default=0) + 1
    existing = unlabeled.by_image()
    images: Dict[int, RasterImage] = {}
    infos: List[ImageInfo] = []
    anns: List[Annotation] = []
    for g, group in enumerate(groups, start=1):
        rng = np.random.default_rng([cfg.seed, 1, g])
        w = max(segments[k].crop.width for k in group)
        h = max(segments[k].crop.height for k in group)
        fits = np.flatnonzero((sizes[:, 0] >= w) & (sizes[:, 1] >= h))
        base_info = unlabeled.images[int(fits[rng.integers(0, len(fits))])]
        canvas = image_loader(base_info.id)
        new_id = next_image
        next_image += 1
        for ann in existing.get(base_info.id, []):
            anns.append(replace(ann, id=len(anns) + 1, image_id=new_id))
        for k in group:
            s = segments[k]
            prng = np.random.default_rng([cfg.seed, 2, k])
            x = int(prng.integers(0, canvas.width - s.crop.width + 1))
            y = int(prng.integers(0, canvas.height - s.crop.height + 1))
            canvas = raster.blend_region(canvas, s.crop, (x, y), cfg.beta)
            anns.append(Annotation(
                id=len(anns) + 1,
                image_id=new_id,
                category_id=s.category_id,
                bbox=(x, y, s.crop.width, s.crop.height),
                score=cfg.synthetic_score,
            ))
        images[new_id] = canvas
        infos.append(ImageInfo(new_id, canvas.width, canvas.height, f"syn_{new_id:06d}.ppm"))
    out = AnnotationSet(tuple(infos), unlabeled.categories, tuple(anns))
    return SynthesisResult(out, images, skipped)


# ---------------------------------------------------------------------------
# On-disk library: manifest.json + one PPM per segment


def save_library(lib: ForegroundLibrary, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(lib.flat()):
        name = f"seg_{k:06d}.ppm"
        raster.save_ppm(s.crop, d / name)
        entries.append({
            "file": name,
            "category_id": s.category_id,
            "source_image_id": s.source_image_id,
            "source_bbox": list(s.source_bbox),
            "flipped": s.flipped,
        })
    manifest = {
        "categories": [{"id": c.id, "name": c.name} for c in lib.categories],
        "segments": entries,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_library(directory) -> ForegroundLibrary:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LibraryError(f"cannot read library manifest in {d}: {exc}") from exc
    cats = tuple(Category(c["id"], c["name"]) for c in manifest.get("categories", []))
    segments: Dict[int, List[ForegroundSegment]] = {
        c.id: [] for c in cats if c.id != UNKNOWN_ID
    }
    for e in manifest["segments"]:
        seg = ForegroundSegment(
            crop=raster.load_ppm(d / e["file"]),
            category_id=int(e["category_id"]),
            source_image_id=int(e["source_image_id"]),
            source_bbox=Box(*e["source_bbox"]),
            flipped=bool(e.get("flipped", False)),
        )
        segments.setdefault(seg.category_id, []).append(seg)
    return ForegroundLibrary({c: tuple(s) for c, s in segments.items()}, cats)
