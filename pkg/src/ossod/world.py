"""Synthetic "shape world": colored shapes on a dark noisy background.

Known classes follow an exponential imbalance profile. Under the default
``"span"`` law the most frequent class is ``imbalance_ratio`` times as common
as the rarest; under ``"per-class"`` each class is ``imbalance_ratio`` times
as common as the next. Unknown classes
never appear in the labeled split; in unlabeled and test images each object
is unknown with probability ``unknown_fraction``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .annotations import UNKNOWN_ID, UNKNOWN_NAME, Annotation, AnnotationSet, Category, ImageInfo
from .errors import WorldError
from .raster import RasterImage


class ClassStyle(NamedTuple):
    name: str
    color: Tuple[int, int, int]
    shape: str
    aspect: float  # mean width / height


# Ordered from most to least frequent. Neighbouring hues (red/orange,
# green/teal, violet/blue) make class priors matter. The red hoop shares the
# majority colour but not its shape. The crimson hoop sits between the majority
# colour and the violet triangles, so the class prior decides its label.
KNOWN_STYLES: Tuple[ClassStyle, ...] = (
    ClassStyle("red-square", (215, 45, 40), "rect", 1.0),
    ClassStyle("green-disc", (45, 200, 60), "ellipse", 1.0),
    ClassStyle("violet-triangle", (115, 50, 225), "triangle", 1.0),
    ClassStyle("orange-square", (215, 95, 40), "rect", 1.0),
    ClassStyle("teal-disc", (40, 200, 130), "ellipse", 1.0),
    ClassStyle("blue-triangle", (50, 70, 225), "triangle", 1.0),
    ClassStyle("magenta-bar", (205, 45, 200), "rect", 2.0),
    ClassStyle("cyan-ring", (40, 200, 205), "ring", 1.0),
)

UNKNOWN_STYLES: Tuple[ClassStyle, ...] = (
    ClassStyle("red-hoop", (220, 50, 45), "thin-ring", 1.0),
    ClassStyle("crimson-hoop", (195, 40, 70), "thin-ring", 1.0),
    ClassStyle("olive-diamond", (150, 160, 40), "diamond", 1.0),
    ClassStyle("white-bar", (200, 200, 200), "rect", 0.5),
)

DEBRIS_COLOR = KNOWN_STYLES[0].color


@dataclass(frozen=True)
class WorldConfig:
    width: int = 64
    height: int = 64
    known_classes: int = 6
    unknown_classes: int = 2
    imbalance_ratio: float = 8.0
    imbalance_law: str = "span"
    objects_min: int = 1
    objects_max: int = 3
    object_size_min: int = 10
    object_size_max: int = 17
    labeled_images: int = 150
    unlabeled_images: int = 1300
    test_images: int = 400
    unknown_fraction: float = 0.2
    overlap_prob: float = 0.0
    debris_rate: float = 0.2
    debris_size_min: int = 4
    debris_size_max: int = 8
    background_level: float = 12.0
    noise: float = 6.0
    color_jitter: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.known_classes <= len(KNOWN_STYLES):
            raise WorldError(f"known_classes must lie in [2, {len(KNOWN_STYLES)}]")
        if not 1 <= self.unknown_classes <= len(UNKNOWN_STYLES):
            raise WorldError(f"unknown_classes must lie in [1, {len(UNKNOWN_STYLES)}]")
        if self.imbalance_ratio < 1:
            raise WorldError("imbalance_ratio must be >= 1")
        if self.imbalance_law not in ("span", "per-class"):
            raise WorldError(f"imbalance_law must be 'span' or 'per-class', "
                             f"got {self.imbalance_law!r}")
        if not 1 <= self.objects_min <= self.objects_max:
            raise WorldError("need 1 <= objects_min <= objects_max")
        if not 3 <= self.object_size_min <= self.object_size_max:
            raise WorldError("need 3 <= object_size_min <= object_size_max")
        if self.object_size_max > min(self.width, self.height):
            raise WorldError("objects must fit inside the image")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise WorldError("overlap_prob must lie in [0, 1]")
        if self.debris_rate < 0 or not 1 <= self.debris_size_min <= self.debris_size_max:
            raise WorldError("need debris_rate >= 0 and 1 <= debris_size_min <= debris_size_max")
        if not 0.0 <= self.unknown_fraction < 1.0:
            raise WorldError("unknown_fraction must lie in [0, 1)")
        if min(self.labeled_images, self.unlabeled_images, self.test_images) < 0:
            raise WorldError("image counts must be non-negative")

    def class_weights(self) -> np.ndarray:
        k = np.arange(self.known_classes)
        step = 1.0 if self.imbalance_law == "per-class" else 1.0 / (self.known_classes - 1)
        w = self.imbalance_ratio ** (-k * step)
        return w / w.sum()


@dataclass(frozen=True)
class Split:
    """An annotation set together with the pixels of its images."""

    annotations: AnnotationSet
    images: Dict[int, RasterImage]

    def loader(self, image_id: int) -> RasterImage:
        return self.images[image_id]


@dataclass(frozen=True)
class World:
    config: WorldConfig
    labeled: Split
    unlabeled: Split
    test: Split
    # hidden labels of the unlabeled split, for diagnostics only
    unlabeled_truth: AnnotationSet
    # per test annotation id: index into UNKNOWN_STYLES for unknown objects
    unknown_kinds: Dict[int, int] = field(default_factory=dict)


def categories(cfg: WorldConfig) -> Tuple[Category, ...]:
    known = tuple(Category(k + 1, KNOWN_STYLES[k].name) for k in range(cfg.known_classes))
    return (Category(UNKNOWN_ID, UNKNOWN_NAME),) + known


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    """Boolean ``(h, w)`` mask of a shape inscribed in a w x h box."""
    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    u = (xs - w / 2) / (w / 2)  # [-1, 1]
    v = (ys - h / 2) / (h / 2)
    if shape == "rect":
        m = np.ones((h, w), dtype=bool)
    elif shape == "ellipse":
        m = u ** 2 + v ** 2 <= 1.0
    elif shape == "ring":
        r2 = u ** 2 + v ** 2
        m = (r2 <= 1.0) & (r2 >= 0.3)
    elif shape == "thin-ring":
        r2 = u ** 2 + v ** 2
        m = (r2 <= 1.0) & (r2 >= 0.55)
    elif shape == "triangle":
        m = np.abs(u) <= (v + 1) / 2
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif shape == "cross":
        m = (np.abs(u) <= 1 / 3) | (np.abs(v) <= 1 / 3)
    elif shape == "thin-cross":
        m = (np.abs(u) <= 1 / 5) | (np.abs(v) <= 1 / 5)
    else:
        raise WorldError(f"unknown shape {shape!r}")
    return m


def _tight(mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def _place(rng, occupied: List[Tuple[int, int, int, int]], w, h, W, H, gap=2, tries=200):
    for _ in range(tries):
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        if all(
            x + w + gap <= ox or ox + ow + gap <= x or y + h + gap <= oy or oy + oh + gap <= y
            for ox, oy, ow, oh in occupied
        ):
            return x, y
    return None


def render_image(cfg: WorldConfig, rng: np.random.Generator, labels: Sequence[Tuple[bool, int]]):
    """Draw one image; ``labels`` holds ``(is_unknown, style index)`` per object.

    Returns the image and ``[(is_unknown, style index, box)]``.
    """
    W, H = cfg.width, cfg.height
    pix = rng.normal(cfg.background_level, cfg.noise, size=(H, W, 3))
    placed = []
    for unknown, idx in labels:
        style = (UNKNOWN_STYLES if unknown else KNOWN_STYLES)[idx]
        size = rng.uniform(cfg.object_size_min, cfg.object_size_max)
        aspect = style.aspect * float(np.exp(rng.normal(0.0, 0.08)))
        w = max(3, int(round(size * np.sqrt(aspect))))
        h = max(3, int(round(size / np.sqrt(aspect))))
        if w > W or h > H:
            raise WorldError(f"object of size {w}x{h} cannot fit in a {W}x{H} image")
        mask = _tight(shape_mask(style.shape, w, h))
        h, w = mask.shape
        # some objects ignore their neighbours and may touch or occlude them
        crowd = rng.random() < cfg.overlap_prob
        spot = _place(rng, [] if crowd else [b for _, _, b in placed], w, h, W, H)
        if spot is None:
            raise WorldError(
                f"cannot pack {len(labels)} objects into a {W}x{H} image; "
                "lower objects_max or object sizes"
            )
        x, y = spot
        color = np.asarray(style.color) * rng.normal(1.0, cfg.color_jitter, size=3)
        obj = color + rng.normal(0.0, cfg.noise, size=(h, w, 3))
        region = pix[y:y + h, x:x + w]
        region[mask] = obj[mask]
        placed.append((unknown, idx, (x, y, w, h)))
    # unannotated debris that looks like the majority class; skipped when
    # there is no free spot
    occupied = [b for _, _, b in placed]
    for _ in range(int(rng.poisson(cfg.debris_rate))):
        w, h = (int(v) for v in rng.integers(cfg.debris_size_min, cfg.debris_size_max + 1, 2))
        mask = np.ones((h, w), dtype=bool)
        spot = _place(rng, occupied, w, h, W, H, tries=20)
        if spot is None:
            continue
        x, y = spot
        color = np.asarray(DEBRIS_COLOR) * rng.normal(1.0, cfg.color_jitter, size=3)
        region = pix[y:y + h, x:x + w]
        region[mask] = color + rng.normal(0.0, cfg.noise, size=(int(mask.sum()), 3))
        occupied.append((x, y, w, h))
    arr = np.clip(np.rint(pix), 0, 255).astype(np.uint8)
    return RasterImage(arr), placed


def _draw_labels(cfg: WorldConfig, rng, allow_unknown: bool) -> List[Tuple[bool, int]]:
    n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    weights = cfg.class_weights()
    out = []
    for _ in range(n):
        if allow_unknown and rng.random() < cfg.unknown_fraction:
            out.append((True, int(rng.integers(0, cfg.unknown_classes))))
        else:
            out.append((False, int(rng.choice(cfg.known_classes, p=weights))))
    return out


_SPLITS = (("labeled", 1, False), ("unlabeled", 100001, True), ("test", 200001, True))


def generate_world(cfg: WorldConfig) -> World:
    """Deterministic in ``cfg.seed``; every image has its own random stream."""
    cats = categories(cfg)
    counts = {"labeled": cfg.labeled_images, "unlabeled": cfg.unlabeled_images,
              "test": cfg.test_images}
    built = {}
    unknown_kinds: Dict[int, int] = {}
    for s_idx, (name, first_id, allow_unknown) in enumerate(_SPLITS):
        infos, anns, images = [], [], {}
        for k in range(counts[name]):
            rng = np.random.default_rng([cfg.seed, s_idx, k])
            labels = _draw_labels(cfg, rng, allow_unknown)
            img, placed = render_image(cfg, rng, labels)
            image_id = first_id + k
            images[image_id] = img
            infos.append(ImageInfo(image_id, cfg.width, cfg.height, f"{name}_{k:06d}.ppm"))
            for unknown, idx, box in placed:
                ann_id = len(anns) + 1
                anns.append(Annotation(ann_id, image_id, UNKNOWN_ID if unknown else idx + 1, box))
                if unknown and name == "test":
                    unknown_kinds[ann_id] = idx
        built[name] = (AnnotationSet(tuple(infos), cats, tuple(anns)), images)

    labeled = Split(*built["labeled"])
    truth, un_images = built["unlabeled"]
    unlabeled = Split(truth.with_annotations(()), un_images)
    test = Split(*built["test"])
    return World(cfg, labeled, unlabeled, test, truth, unknown_kinds)


def config_fields() -> List[str]:
    return [f.name for f in fields(WorldConfig)]
