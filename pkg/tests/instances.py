"""Random problem instances shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from conftest import PARASITE_COUNTS, make_set
from ossod.annotations import Category
from ossod.cce import ForegroundLibrary, ForegroundSegment
from ossod.geometry import Box
from ossod.raster import RasterImage


def ap_instance(rng, n_img=3, n_gt=10, n_det=20, distinct=True):
    """GT and scored detections for category 1; detections also hit category 2."""
    boxes = []
    for _ in range(rng.integers(0, n_gt + 1)):
        boxes.append((int(rng.integers(1, n_img + 1)), 1,
                      (int(rng.integers(0, 20)), int(rng.integers(0, 20)),
                       int(rng.integers(2, 10)), int(rng.integers(2, 10)))))
    n = int(rng.integers(0, n_det + 1))
    if distinct:
        scores = rng.permutation(np.linspace(0.05, 0.95, n))
    else:
        scores = rng.choice([0.2, 0.5, 0.8], n)
    dets = []
    for k in range(n):
        if boxes and rng.random() < 0.6:
            iid, _, (x, y, w, h) = boxes[rng.integers(0, len(boxes))]
            x = max(0, x + int(rng.integers(-2, 3)))
            y = max(0, y + int(rng.integers(-2, 3)))
        else:
            iid = int(rng.integers(1, n_img + 1))
            x, y, w, h = (int(rng.integers(0, 20)), int(rng.integers(0, 20)),
                          int(rng.integers(2, 10)), int(rng.integers(2, 10)))
        dets.append((iid, int(rng.choice([1, 2])), (x, y, w, h), float(scores[k])))
    gt = make_set(boxes, n_known=2, n_images=n_img, size=40)
    pred = make_set([d[:3] for d in dets], n_known=2, n_images=n_img, size=40,
                    scores=[d[3] for d in dets])
    return gt, pred


def oracle_inputs(gt, pred, cat):
    gt_boxes = {}
    for a in gt.annotations:
        if a.category_id == cat:
            gt_boxes.setdefault(a.image_id, []).append(a.bbox)
    dets = [(a.image_id, a.score, a.id, a.bbox) for a in pred.annotations if a.category_id == cat]
    return gt_boxes, dets


def fusion_instance(rng, n_known=3, n_img=2):
    """Known and unknown detection sets with plenty of near-gate overlaps."""
    known, unknown = [], []
    for iid in range(1, n_img + 1):
        mine = []
        for _ in range(rng.integers(0, 11)):
            box = (int(rng.integers(0, 30)), int(rng.integers(0, 30)),
                   int(rng.integers(4, 12)), int(rng.integers(4, 12)))
            mine.append((iid, int(rng.integers(1, n_known + 1)), box,
                         float(np.round(rng.random(), 2))))
        for _ in range(rng.integers(0, 11)):
            if mine and rng.random() < 0.7:
                x, y, w, h = mine[rng.integers(0, len(mine))][2]
                box = (max(0, x + int(rng.integers(-1, 2))), max(0, y + int(rng.integers(-1, 2))),
                       w + int(rng.integers(-1, 2)), h + int(rng.integers(-1, 2)))
            else:
                box = (int(rng.integers(0, 30)), int(rng.integers(0, 30)),
                       int(rng.integers(4, 12)), int(rng.integers(4, 12)))
            unknown.append((iid, 0, box, float(np.round(rng.random(), 2))))
        known += mine
    # scattered ids exercise id reissuing
    known_ids = sorted(rng.choice(np.arange(1, 200), size=len(known), replace=False).tolist())
    ks = make_set([k[:3] for k in known], n_known=n_known, n_images=n_img, size=50,
                  scores=[k[3] for k in known])
    ks = ks.with_annotations([a.__class__(i, a.image_id, a.category_id, a.bbox, a.score)
                              for i, a in zip(known_ids, ks.annotations)])
    us = make_set([u[:3] for u in unknown], n_known=n_known, n_images=n_img, size=50,
                  scores=[u[3] for u in unknown], start_id=500)
    ap = {c: float(np.round(rng.random(), 3)) for c in range(1, n_known + 1)}
    return ks, us, ap


def as_dicts(s):
    return [{"id": a.id, "image_id": a.image_id, "category_id": a.category_id,
             "bbox": a.bbox, "score": a.score} for a in s.annotations]


def toy_library(counts, categories=None):
    """Library of 1x1 segments with the given per-class counts."""
    segs = {}
    for cid, n in counts.items():
        segs[cid] = tuple(ForegroundSegment(RasterImage.filled(1, 1, (cid, k % 256, 0)), cid,
                                            k + 1, Box(0, 0, 1, 1)) for k in range(n))
    if categories is None:
        categories = (Category(0, "unknown"),) + tuple(Category(c, f"c{c}") for c in counts)
    return ForegroundLibrary(segs, categories)


def parasite_library():
    cats = (Category(0, "unknown"),) + tuple(
        Category(i, name) for i, name in enumerate(PARASITE_COUNTS, start=1))
    return toy_library({i: n for i, n in enumerate(PARASITE_COUNTS.values(), start=1)}, cats)


# Percentage row of the Parasite class-distribution table, in its column order.
PARASITE_TABLE_PERCENT = {
    "Ancylostoma Spp": 51.37,
    "Ascaris Lumbricoides": 8.24,
    "Enterobius Vermicularis": 7.14,
    "Fasciola Hepatica": 13.19,
    "Hymenolepis": 12.36,
    "Schistosoma": 7.69,
}
