"""Mean-teacher loop with optional class-balanced pasting and unknown fusion.

Per iteration the EMA teacher pseudo-labels a batch of weakly augmented
unlabeled images, the student is pulled toward labeled examples (weight 1)
and pseudo-labeled examples (weight ``lam``), and the teacher then takes an
EMA step toward the student. Losses are computed for accounting only; the
prototype detector learns through running-mean updates, not gradients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import cce, oodfc
from .annotations import UNKNOWN_ID, Annotation, AnnotationSet, class_frequencies
from .detector import (
    Candidates,
    DetectionResult,
    DetectorModel,
    annotation_examples,
    box_features,
    classify,
    fit_supervised,
    predict,
    propose,
    to_annotation_set,
    update_from_examples,
)
from .ema import EmaState, ParamVector, ema_update
from .errors import ConfigError, TrainingError
from .geometry import ApTable, evaluate, iou, iou_matrix, load_ap_report
from .raster import CoordinateMap, RasterImage, apply_augmentation, sample_augmentation
from .world import Split, World, WorldConfig, generate_world

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "cce", "oodfc", "cce+oodfc")


@dataclass(frozen=True)
class LossReport:
    step: int
    L_cls: float
    L_loc: float
    L_consistency: float
    L_pseudo: float
    lam: float
    L_s: float = field(init=False)
    L_u: float = field(init=False)
    L: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "L_s", self.L_cls + self.L_loc)
        object.__setattr__(self, "L_u", self.L_consistency + self.L_pseudo)
        object.__setattr__(self, "L", self.L_s + self.lam * self.L_u)

    def to_dict(self) -> dict:
        return {"step": self.step, "L_s": self.L_s, "L_cls": self.L_cls, "L_loc": self.L_loc,
                "L_u": self.L_u, "L_consistency": self.L_consistency, "L_pseudo": self.L_pseudo,
                "lambda": self.lam, "L": self.L}


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = WorldConfig()
    iterations: int = 1000
    labeled_batch: int = 4
    unlabeled_batch: int = 16
    synthetic_batch: int = 4
    lam: float = 1.0
    ema_alpha: float = 0.999
    pseudo_threshold: float = 0.7
    enable_cce: bool = False
    enable_oodfc: bool = False
    fusion: oodfc.FusionConfig = oodfc.FusionConfig()
    synthesis: cce.SynthesisConfig = cce.SynthesisConfig()
    # detector hyper-parameters
    margin: float = 1.5
    temperature: float = 0.05
    prior_strength: float = 0.08
    bg_threshold: float = 45.0
    min_area: int = 6
    # strong augmentation ranges
    jitter_min: float = 0.8
    jitter_max: float = 1.2
    cutout_min: float = 0.1
    cutout_max: float = 0.3
    eval_open_set: bool = False
    # AP report used for the fusion thresholds; empty means the supervised
    # detector's AP on the labeled split
    fusion_ap_file: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if min(self.labeled_batch, self.unlabeled_batch, self.synthetic_batch) < 0:
            raise ConfigError("batch sizes must be non-negative")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        for name in ("ema_alpha", "pseudo_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.5 <= self.jitter_min <= self.jitter_max <= 1.5:
            raise ConfigError("need 0.5 <= jitter_min <= jitter_max <= 1.5")
        if not 0.0 < self.cutout_min <= self.cutout_max <= 1.0:
            raise ConfigError("need 0 < cutout_min <= cutout_max <= 1")

    def variant(self, name: str) -> "RunConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}")
        return replace(self, enable_cce="cce" in name, enable_oodfc="oodfc" in name)

    def detector_kwargs(self) -> dict:
        return dict(margin=self.margin, temperature=self.temperature,
                    prior_strength=self.prior_strength, bg_threshold=self.bg_threshold,
                    min_area=self.min_area)


# ---------------------------------------------------------------------------
# Losses


def _greedy_pairs(a_boxes, b_boxes, thresh: float = 0.5) -> List[Tuple[int, int]]:
    if len(a_boxes) == 0 or len(b_boxes) == 0:
        return []
    m = iou_matrix(a_boxes, b_boxes)
    cand = [(-m[i, j], i, j) for i in range(m.shape[0]) for j in range(m.shape[1])
            if m[i, j] >= thresh]
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return pairs


def consistency_loss(
    preds_weak: Sequence[DetectionResult],
    preds_strong: Sequence[DetectionResult],
    coord_map: Optional[CoordinateMap] = None,
) -> float:
    """Squared score-vector disagreement between two views of one image.

    Strong-view boxes are first mapped back with ``coord_map`` (if given).
    Pairs are formed greedily by descending IoU (>= 0.5); an unmatched
    detection on either side contributes the squared norm of its scores.
    """
    strong_boxes = [coord_map.inverse(p.box) if coord_map else p.box for p in preds_strong]
    pairs = _greedy_pairs([p.box for p in preds_weak], strong_boxes)
    total = 0.0
    seen_w, seen_s = set(), set()
    for i, j in pairs:
        a = np.asarray(preds_weak[i].class_scores)
        b = np.asarray(preds_strong[j].class_scores)
        total += float(np.sum((a - b) ** 2))
        seen_w.add(i)
        seen_s.add(j)
    for k, p in enumerate(preds_weak):
        if k not in seen_w:
            total += float(np.sum(np.square(p.class_scores)))
    for k, p in enumerate(preds_strong):
        if k not in seen_s:
            total += float(np.sum(np.square(p.class_scores)))
    return total


def _pseudo_terms(
    student_preds: Sequence[DetectionResult], pseudo: Sequence[Annotation], class_ids
) -> Tuple[float, int]:
    labels = [a for a in pseudo if a.category_id != UNKNOWN_ID]
    pairs = _greedy_pairs([p.box for p in student_preds], [a.bbox for a in labels])
    index = {cid: k for k, cid in enumerate(class_ids)}
    total = 0.0
    for i, j in pairs:
        p = student_preds[i].class_scores[index[labels[j].category_id]]
        total -= math.log(max(p, 1e-12))
    return total, len(pairs)


def pseudo_loss(
    student_preds: Sequence[DetectionResult], pseudo: AnnotationSet, class_ids=None
) -> float:
    """Mean cross-entropy of matched student scores against pseudo-label classes."""
    if class_ids is None:
        class_ids = pseudo.known_category_ids
    total, n = _pseudo_terms(student_preds, pseudo.annotations, class_ids)
    return total / n if n else 0.0


def supervised_terms(preds: Sequence[DetectionResult], gts: Sequence[Annotation], class_ids):
    """Summed classification and localisation terms over ground-truth boxes.

    A GT box without a matching detection costs ``log K`` (uniform guess) and a
    localisation penalty of 1.
    """
    gts = [a for a in gts if a.category_id != UNKNOWN_ID]
    pairs = dict((j, i) for i, j in _greedy_pairs([p.box for p in preds], [a.bbox for a in gts]))
    index = {cid: k for k, cid in enumerate(class_ids)}
    cls = loc = 0.0
    for j, a in enumerate(gts):
        if j in pairs:
            p = preds[pairs[j]]
            cls -= math.log(max(p.class_scores[index[a.category_id]], 1e-12))
            loc += 1.0 - iou(p.box, a.bbox)
        else:
            cls += math.log(len(class_ids))
            loc += 1.0
    return cls, loc, len(gts)


# ---------------------------------------------------------------------------
# Training


@dataclass
class RunResult:
    config: RunConfig
    teacher: DetectorModel
    student: DetectorModel
    supervised: DetectorModel
    initial_student: DetectorModel
    losses: List[LossReport]
    ap: ApTable
    test_predictions: AnnotationSet
    student_params: List[ParamVector]
    teacher_params: List[ParamVector]
    pseudo_log: List[dict]
    unknown_as_majority: int
    majority_class: int
    rare_classes: Tuple[int, ...]
    synthetic_count: int = 0


def _map_result(r: DetectionResult, cmap: CoordinateMap) -> DetectionResult:
    return replace(r, box=type(r.box)(*cmap.inverse(r.box)))


def _view_predict(model, img, spec, open_set=False, cands=None):
    """Predict on an augmented view, boxes mapped back to ``img`` coordinates.

    ``cands`` may carry proposals already extracted from this exact view.
    """
    view, cmap = apply_augmentation(img, spec)
    if cands is None:
        cands = propose(view, model.bg_threshold, model.min_area)
    res = [_map_result(r, cmap) for r in classify(model, cands, open_set)]
    return res, cands, cmap


def _split_examples(split: Split, bg_threshold: float) -> Dict[int, tuple]:
    """Per-image GT features for fast labeled-batch updates."""
    by_image = {}
    anns = split.annotations.by_image()
    for image_id, items in anns.items():
        sub = Split(split.annotations.with_annotations(items), split.images)
        by_image[image_id] = annotation_examples(sub, bg_threshold)
    return by_image


def _concat(examples: Sequence[tuple]):
    if not examples:
        return np.zeros((0, 5)), np.zeros(0, dtype=np.int64), np.zeros(0)
    return (np.concatenate([e[0] for e in examples]),
            np.concatenate([e[1] for e in examples]),
            np.concatenate([e[2] for e in examples]))


def majority_and_rare(labeled: AnnotationSet, n_rare: int = 2):
    stats = class_frequencies(labeled)
    order = sorted(stats.counts, key=lambda c: (-stats.counts[c], c))
    return order[0], tuple(sorted(order[-n_rare:]))


def count_unknown_as(test: AnnotationSet, preds: AnnotationSet, category: int,
                     iou_thresh: float = 0.5) -> int:
    """Unknown GT objects covered (IoU >= thresh) by a prediction of ``category``."""
    by_image: Dict[int, list] = {}
    for a in preds.annotations:
        if a.category_id == category:
            by_image.setdefault(a.image_id, []).append(a.bbox)
    n = 0
    for a in test.annotations:
        if a.category_id != UNKNOWN_ID:
            continue
        boxes = by_image.get(a.image_id, [])
        if boxes and iou_matrix([a.bbox], boxes).max() >= iou_thresh:
            n += 1
    return n


def predict_split(model: DetectorModel, split: Split, open_set: bool = False) -> AnnotationSet:
    res = {iid: predict(model, split.images[iid], open_set) for iid in sorted(split.images)}
    return to_annotation_set(res, split.annotations)


def _fixed_labels(split: Split) -> Dict[int, List[Annotation]]:
    return split.annotations.by_image()


def train_run(cfg: RunConfig, world: Optional[World] = None) -> RunResult:
    if world is None:
        world = generate_world(replace(cfg.world, seed=cfg.seed))
    labeled, unlabeled, test = world.labeled, world.unlabeled, world.test
    dk = cfg.detector_kwargs()
    cats = unlabeled.annotations.categories

    supervised = fit_supervised(labeled, **dk)
    class_ids = supervised.class_ids
    # unlabeled-stream pools: 0 = D_U, 1 = synthetic images (when CCE is on)
    streams: List[Tuple[Split, Dict[int, List[Annotation]]]] = [(unlabeled, {})]
    synthetic_count = 0
    if cfg.enable_cce:
        lib = cce.balance_library(cce.build_library(labeled.annotations, labeled.loader), cfg.seed)
        syn = cce.synthesize(lib, unlabeled.annotations, unlabeled.loader,
                             replace(cfg.synthesis, seed=cfg.seed), first_image_id=900001)
        syn_split = Split(syn.annotations, syn.images)
        synthetic_count = len(syn.annotations.annotations)
        streams.append((syn_split, _fixed_labels(syn_split)))
        student = fit_supervised(labeled, syn_split, **dk)
        # the open-set radius stays the one learned from clean labeled data
        student = replace(student, delta=supervised.delta)
    else:
        student = supervised
    initial_student = student
    ema = EmaState(cfg.ema_alpha, student.to_params())
    teacher = student

    thresholds = None
    unknown_pool: Dict[Tuple[int, int], List[Annotation]] = {}
    if cfg.enable_oodfc:
        if cfg.fusion_ap_file:
            try:
                sup_ap = load_ap_report(cfg.fusion_ap_file)
            except OSError as exc:
                raise ConfigError(f"cannot read fusion_ap_file: {exc}") from exc
        else:
            sup_ap = evaluate(labeled.annotations, predict_split(supervised, labeled))
        thresholds = oodfc.build_threshold_table(sup_ap, cfg.fusion, class_ids)
        for p, (split, _) in enumerate(streams):
            for iid in sorted(split.images):
                dets = [r for r in predict(supervised, split.images[iid], open_set=True)
                        if r.category_id == UNKNOWN_ID]
                unknown_pool[(p, iid)] = [
                    Annotation(k + 1, iid, UNKNOWN_ID, tuple(r.box), r.confidence)
                    for k, r in enumerate(dets)
                ]

    lab_examples = _split_examples(labeled, supervised.bg_threshold)
    lab_gt = labeled.annotations.by_image()
    lab_ids = sorted(labeled.images)
    stream_ids = [sorted(split.images) for split, _ in streams]
    batch_sizes = [cfg.unlabeled_batch, cfg.synthetic_batch]

    # Proposals depend only on pixels and the fixed proposal parameters, and a
    # weak view is the image or its mirror, so both are cached.
    cand_cache: Dict[tuple, Candidates] = {}

    def cached(key, img, spec=None):
        if key not in cand_cache:
            view = img if spec is None else apply_augmentation(img, spec)[0]
            cand_cache[key] = propose(view, supervised.bg_threshold, supervised.min_area)
        return cand_cache[key]

    losses: List[LossReport] = []
    student_params: List[ParamVector] = []
    teacher_params: List[ParamVector] = [teacher.to_params()]
    pseudo_log: List[dict] = []

    for step in range(1, cfg.iterations + 1):
        rng = np.random.default_rng([cfg.seed, 7, step])
        try:
            batch = [lab_ids[k] for k in rng.choice(
                len(lab_ids), size=min(cfg.labeled_batch, len(lab_ids)), replace=False)]
            cls_sum = loc_sum = 0.0
            n_gt = 0
            for iid in batch:
                preds = classify(student, cached(("L", iid), labeled.images[iid]))
                c, l, n = supervised_terms(preds, lab_gt[iid], class_ids)
                cls_sum, loc_sum, n_gt = cls_sum + c, loc_sum + l, n_gt + n
            lab_ex = _concat([lab_examples[i] for i in batch])

            cons_sum = 0.0
            ce_sum, ce_n = 0.0, 0
            pseudo_ex = []
            for p, (split, fixed) in enumerate(streams):
                ids = stream_ids[p]
                size = min(batch_sizes[p], len(ids))
                for iid in [ids[k] for k in rng.choice(len(ids), size=size, replace=False)]:
                    img = split.images[iid]
                    aseed = int(rng.integers(0, 2 ** 31))
                    weak = sample_augmentation("weak", aseed, img.width, img.height)
                    strong = sample_augmentation(
                        "strong", aseed + 1, img.width, img.height,
                        jitter_range=(cfg.jitter_min, cfg.jitter_max),
                        cutout_frac=(cfg.cutout_min, cfg.cutout_max))
                    wc = cached((p, iid, weak.flip), img, weak)
                    t_preds, cands, _ = _view_predict(teacher, img, weak, cands=wc)
                    fixed_anns = fixed.get(iid, [])
                    entries = [(a, box_features(img.pixels, a.bbox, supervised.bg_threshold))
                               for a in fixed_anns]
                    fixed_boxes = [a.bbox for a in fixed_anns]
                    for k, r in enumerate(t_preds):
                        if r.confidence < cfg.pseudo_threshold:
                            continue
                        if fixed_boxes and iou_matrix([r.box], fixed_boxes).max() > 0.5:
                            continue
                        a = Annotation(0, iid, r.category_id, tuple(r.box), r.confidence)
                        entries.append((a, cands.features[k]))
                    known = [replace(a, id=k + 1) for k, (a, _) in enumerate(entries)]
                    use = list(range(len(known)))
                    fused_anns = known
                    if cfg.enable_oodfc:
                        info = split.annotations.image(iid)
                        fused = oodfc.fuse(
                            AnnotationSet((info,), cats, tuple(known)),
                            AnnotationSet((info,), cats, tuple(unknown_pool[(p, iid)])),
                            thresholds, cfg.fusion)
                        fused_anns = list(fused.annotations)
                        use = _unsuppressed(known, fused_anns, cfg.fusion.iou_gate)
                    pseudo_log.append({
                        "step": step, "stream": p, "image_id": iid,
                        "pseudo": [[a.category_id, list(a.bbox), a.score] for a in known],
                        "fused": [[a.category_id, list(a.bbox), a.score] for a in fused_anns],
                    })
                    if use:
                        pseudo_ex.append((
                            np.asarray([entries[k][1] for k in use]),
                            np.asarray([known[k].category_id for k in use]),
                            np.ones(len(use)),
                        ))
                    s_weak, _, _ = _view_predict(student, img, weak, cands=wc)
                    s_strong, _, _ = _view_predict(student, img, strong)
                    cons_sum += consistency_loss(s_weak, s_strong)
                    t, n = _pseudo_terms(s_strong, fused_anns, class_ids)
                    ce_sum, ce_n = ce_sum + t, ce_n + n

            report = LossReport(
                step=step,
                L_cls=cls_sum / n_gt if n_gt else 0.0,
                L_loc=loc_sum / n_gt if n_gt else 0.0,
                L_consistency=cons_sum,
                L_pseudo=ce_sum / ce_n if ce_n else 0.0,
                lam=cfg.lam,
            )
            student = update_from_examples(student, *lab_ex, weight=1.0)
            student = update_from_examples(student, *_concat(pseudo_ex), weight=cfg.lam)
            ema = ema_update(ema, student.to_params())
            teacher = teacher.with_params(ema.current)
        except TrainingError:
            raise
        except Exception as exc:
            raise TrainingError(f"iteration {step}: {exc}") from exc
        losses.append(report)
        student_params.append(student.to_params())
        teacher_params.append(ema.current)

    preds = predict_split(teacher, test, open_set=cfg.eval_open_set)
    table = evaluate(test.annotations, preds)
    majority, rare = majority_and_rare(labeled.annotations)
    return RunResult(
        config=cfg,
        teacher=teacher,
        student=student,
        supervised=supervised,
        initial_student=initial_student,
        losses=losses,
        ap=table,
        test_predictions=preds,
        student_params=student_params,
        teacher_params=teacher_params,
        pseudo_log=pseudo_log,
        unknown_as_majority=count_unknown_as(test.annotations, preds, majority),
        majority_class=majority,
        rare_classes=rare,
        synthetic_count=synthetic_count,
    )


def _unsuppressed(known: List[Annotation], fused: List[Annotation], gate: float) -> List[int]:
    """Indices of known pseudo-labels not co-located with a retained unknown."""
    appended = [a.bbox for a in fused if a.category_id == UNKNOWN_ID]
    if not appended or not known:
        return list(range(len(known)))
    ov = iou_matrix([a.bbox for a in known], appended)
    return [k for k in range(len(known)) if not np.any(ov[k] > gate)]


# ---------------------------------------------------------------------------
# Ablation


@dataclass
class AblationReport:
    seeds: List[int]
    runs: Dict[int, Dict[str, dict]]  # seed -> variant -> summary

    def medians(self, key: str = "map") -> Dict[str, float]:
        return {v: float(np.median([self.runs[s][v][key] for s in self.seeds]))
                for v in VARIANTS}

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "variants": list(VARIANTS),
            "runs": {str(s): self.runs[s] for s in self.seeds},
            "median_map": self.medians("map"),
            "median_rare_ap": self.medians("rare_ap"),
            "median_unknown_as_majority": self.medians("unknown_as_majority"),
        }

    def format_table(self) -> str:
        head = f"{'seed':>6}  " + "  ".join(f"{v:>10}" for v in VARIANTS)
        lines = ["mAP50 on test split (known classes)", head]
        for s in self.seeds:
            lines.append(f"{s:>6}  " + "  ".join(f"{self.runs[s][v]['map']:10.4f}"
                                                 for v in VARIANTS))
        for key, label in (("map", "median"), ("rare_ap", "rare AP"),
                           ("unknown_as_majority", "unk->maj")):
            med = self.medians(key)
            lines.append(f"{label:>6}  " + "  ".join(f"{med[v]:10.4f}" for v in VARIANTS))
        return "\n".join(lines)


def summarize(result: RunResult) -> dict:
    rare = result.rare_classes
    return {
        "map": result.ap.map,
        "per_class": {str(k): v for k, v in result.ap.per_class.items()},
        "rare_classes": list(rare),
        "rare_ap": float(np.mean([result.ap.per_class.get(c, 0.0) for c in rare])),
        "majority_class": result.majority_class,
        "unknown_as_majority": result.unknown_as_majority,
        "synthetic_annotations": result.synthetic_count,
        "final_loss": result.losses[-1].to_dict() if result.losses else None,
    }


def run_ablation(cfg: RunConfig, seeds: Sequence[int], on_run=None) -> AblationReport:
    if not seeds:
        raise ConfigError("run_ablation needs at least one seed")
    runs: Dict[int, Dict[str, dict]] = {}
    for s in seeds:
        world = generate_world(replace(cfg.world, seed=s))
        runs[s] = {}
        for v in VARIANTS:
            result = train_run(replace(cfg.variant(v), seed=s), world)
            runs[s][v] = summarize(result)
            if on_run is not None:
                on_run(s, v, result)
    return AblationReport(list(seeds), runs)
