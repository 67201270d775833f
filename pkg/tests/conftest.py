from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ossod.annotations import Annotation, AnnotationSet, Category, ImageInfo  # noqa: E402

# Known-class object counts of the public Parasite training split.
PARASITE_COUNTS = {
    "Ancylostoma Spp": 187,
    "Ascaris Lumbricoides": 30,
    "Enterobius Vermicularis": 26,
    "Fasciola Hepatica": 48,
    "Hymenolepis": 28,
    "Schistosoma": 45,
}


def make_categories(n_known: int, with_unknown: bool = True):
    cats = [Category(0, "unknown")] if with_unknown else []
    return tuple(cats + [Category(k, f"class{k}") for k in range(1, n_known + 1)])


def make_set(boxes, n_known=3, n_images=1, size=100, scores=None, start_id=1):
    """``boxes``: list of (image_id, category_id, (x, y, w, h))."""
    images = tuple(ImageInfo(i, size, size, f"img{i}.ppm") for i in range(1, n_images + 1))
    anns = []
    for k, (iid, cid, box) in enumerate(boxes):
        score = None if scores is None else scores[k]
        anns.append(Annotation(start_id + k, iid, cid, tuple(box), score))
    return AnnotationSet(images, make_categories(n_known), tuple(anns))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
