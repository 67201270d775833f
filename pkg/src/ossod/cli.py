"""Command-line entry point: ``ossod <command> ...``.

Every command prints a plain-text table and writes JSON next to it. Errors
are reported as ``error[<category>]: message`` with a category-specific exit
code (see :data:`ossod.errors.EXIT_CODES`).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import annotations as ann
from . import cce, oodfc, raster
from .config import format_config, load_config
from .errors import EXIT_CODES, ConfigError, OssodError
from .geometry import evaluate, load_ap_report, save_ap_report
from .training import RunConfig, run_ablation
from .world import World, generate_world

log = logging.getLogger("ossod")


def _write_json(obj, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _image_loader(s: ann.AnnotationSet, directory):
    root = Path(directory)
    names = {i.id: i.file_name for i in s.images}

    def load(image_id: int) -> raster.RasterImage:
        name = names.get(image_id)
        if not name:
            raise ConfigError(f"image {image_id} has no file_name")
        return raster.load_ppm(root / name)

    return load


def _parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None
    if not seeds:
        raise ConfigError("need at least one seed")
    return seeds


# ---------------------------------------------------------------------------
# Commands


def cmd_stats(args) -> None:
    s = ann.parse_annotation_set(args.annotations)
    stats = ann.class_frequencies(s)
    names = {c.id: c.name for c in s.categories}
    print(f"{'id':>4}  {'category':<24} {'count':>7} {'percent':>8}")
    for cid, n in stats.counts.items():
        print(f"{cid:>4}  {names.get(cid, '?'):<24} {n:>7} {stats.percentages[cid]:8.2f}")
    print(f"{'':>4}  {'total':<24} {stats.total:>7}")
    if args.out:
        _write_json({
            "counts": {str(k): v for k, v in stats.counts.items()},
            "percentages": {str(k): v for k, v in stats.percentages.items()},
            "total": stats.total,
        }, args.out)


def cmd_build_library(args) -> None:
    s = ann.parse_annotation_set(args.annotations)
    lib = cce.build_library(s, _image_loader(s, args.images))
    cce.save_library(lib, args.out)
    _print_library(lib)


def cmd_balance_library(args) -> None:
    lib = cce.load_library(args.library)
    out = cce.balance_library(lib, args.seed)
    cce.save_library(out, args.out)
    _print_library(out)


def _print_library(lib: cce.ForegroundLibrary) -> None:
    alphas = lib.alphas
    print(f"{'id':>4} {'segments':>9} {'alpha':>8}")
    for cid, n in lib.frequencies.items():
        a = f"{alphas[cid]:8.3f}" if cid in alphas else f"{'-':>8}"
        print(f"{cid:>4} {n:>9} {a}")
    print(f"f_target = {lib.f_target:.3f}")


def cmd_synthesize(args) -> None:
    lib = cce.load_library(args.library)
    unl = ann.parse_annotation_set(args.unlabeled)
    cfg = cce.SynthesisConfig(beta=args.beta, synthetic_score=args.score,
                              placements_per_image=args.placements, seed=args.seed)
    res = cce.synthesize(lib, unl, _image_loader(unl, args.images), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for info in res.annotations.images:
        raster.save_ppm(res.images[info.id], out / info.file_name)
    ann.save_annotation_set(res.annotations, out / "annotations.json")
    print(f"images: {len(res.images)}  pasted: {len(res.annotations.annotations)}  "
          f"skipped: {res.skipped}")


def cmd_fuse(args) -> None:
    known = ann.parse_annotation_set(args.known)
    unknown = ann.parse_annotation_set(args.unknown)
    aps = load_ap_report(args.ap)
    cfg = oodfc.FusionConfig(gamma=args.gamma, iou_gate=args.iou_gate,
                             base_unknown_threshold=args.base_threshold)
    thresholds = oodfc.build_threshold_table(aps, cfg, known.known_category_ids)
    fused = oodfc.fuse(known, unknown, thresholds, cfg)
    ann.save_annotation_set(fused, args.out)
    print(f"{'id':>4} {'AP':>8} {'T':>8}")
    for cid in sorted(thresholds):
        print(f"{cid:>4} {aps.per_class[cid]:8.4f} {thresholds[cid]:8.4f}")
    added = len(fused.annotations) - len(known.annotations)
    print(f"known: {len(known.annotations)}  unknown kept: {added} of {len(unknown.annotations)}")


def cmd_eval(args) -> None:
    gt = ann.parse_annotation_set(args.gt)
    pred = ann.parse_annotation_set(args.pred)
    table = evaluate(gt, pred, args.iou)
    print(table.format_table({c.id: c.name for c in gt.categories}))
    if args.out:
        save_ap_report(table, args.out)


def dump_world(world: World, directory) -> None:
    d = Path(directory)
    for name in ("labeled", "unlabeled", "test"):
        split = getattr(world, name)
        sub = d / name
        sub.mkdir(parents=True, exist_ok=True)
        for info in split.annotations.images:
            raster.save_ppm(split.images[info.id], sub / info.file_name)
        ann.save_annotation_set(split.annotations, sub / "annotations.json")
    ann.save_annotation_set(world.unlabeled_truth, d / "unlabeled" / "truth.json")


def cmd_simulate(args) -> None:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    seeds = _parse_seeds(args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")

    def on_run(seed, variant, result):
        tag = f"{variant.replace('+', '_')}_seed{seed}"
        with open(out / "losses" / f"{tag}.jsonl", "w", encoding="utf-8") as fh:
            for r in result.losses:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        if args.pseudo_logs:
            with open(out / "pseudo" / f"{tag}.jsonl", "w", encoding="utf-8") as fh:
                for entry in result.pseudo_log:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
        log.info("seed %d %-10s mAP50 %.4f", seed, variant, result.ap.map)

    (out / "losses").mkdir(exist_ok=True)
    if args.pseudo_logs:
        (out / "pseudo").mkdir(exist_ok=True)
    if args.dump_world:
        for s in seeds:
            dump_world(generate_world(replace(cfg.world, seed=s)), out / "world" / f"seed{s}")
    report = run_ablation(cfg, seeds, on_run=on_run)
    _write_json(report.to_dict(), out / "report.json")
    text = report.format_table()
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ossod", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="per-class object counts and percentages")
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", help="JSON report path")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("build-library", help="crop every known-class box into a library")
    s.add_argument("--annotations", required=True)
    s.add_argument("--images", required=True, help="directory holding the PPM files")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_library)

    s = sub.add_parser("balance-library", help="resample every class to the mean count")
    s.add_argument("--library", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_balance_library)

    s = sub.add_parser("synthesize", help="paste library segments into unlabeled images")
    s.add_argument("--library", required=True)
    s.add_argument("--unlabeled", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--beta", type=float, default=0.5)
    s.add_argument("--score", type=float, default=0.8)
    s.add_argument("--placements", type=int, default=3, help="segments per image")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("fuse", help="append unknown detections to known pseudo-labels")
    s.add_argument("--known", required=True)
    s.add_argument("--unknown", required=True)
    s.add_argument("--ap", required=True, help="AP report written by `eval`")
    s.add_argument("--gamma", type=float, default=1.5)
    s.add_argument("--iou-gate", type=float, default=0.7)
    s.add_argument("--base-threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("eval", help="per-class AP and mAP of predictions")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--out", help="JSON report path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="run the four-variant ablation on the shape world")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--seeds", default="1,2,3,4,5")
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, help="override the configured iterations")
    s.add_argument("--pseudo-logs", action="store_true", help="write per-image pseudo-label logs")
    s.add_argument("--dump-world", action="store_true", help="write the generated worlds")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        args.func(args)
    except OssodError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
