"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Criteria 8 and 9 share one five-seed ablation run of the default config;
criterion 7 checks every loss report logged during that run.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from instances import (
    PARASITE_TABLE_PERCENT,
    ap_instance,
    as_dicts,
    fusion_instance,
    oracle_inputs,
    parasite_library,
    toy_library,
)
from oracles import ap_oracle, fuse_reference
from ossod import cce, cli
from ossod.ema import EmaState, ParamVector, ema_update
from ossod.geometry import ApTable, average_precision
from ossod.oodfc import FusionConfig, build_threshold_table, dynamic_threshold, fuse
from ossod.raster import RasterImage, blend_region
from ossod.training import VARIANTS, RunConfig, run_ablation

SEEDS = [1, 2, 3, 4, 5]


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line past pytest's capture, then assert."""

    def report(number: int, checks: dict, detail: str = "") -> None:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        if failed:
            line += f" [failed: {', '.join(failed)}]"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


def test_criterion_01_threshold_formula(verdict):
    t0 = time.perf_counter()
    top = dynamic_threshold(1.0, 1.5)
    bottom = dynamic_threshold(0.0, 1.5)
    grid = [dynamic_threshold(float(a), 1.5) for a in np.linspace(0.0, 1.0, 1000)]
    elapsed = time.perf_counter() - t0
    verdict(1, {
        "T(1)=1": top == 1.0,
        "T(0)=exp(-1.5)": abs(bottom - math.exp(-1.5)) <= 1e-12,
        "monotone": all(b >= a for a, b in zip(grid, grid[1:])),
        "runtime<1s": elapsed < 1.0,
    }, f"T(0)={bottom:.15f}, {elapsed:.3f}s")


def test_criterion_02_fusion_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cfg = FusionConfig()
    equal = preserved = True
    for _ in range(500):
        known, unknown, ap = fusion_instance(rng)
        table = build_threshold_table(ApTable.from_per_class(ap), cfg)
        got = fuse(known, unknown, table, cfg)
        want = fuse_reference(as_dicts(known), as_dicts(unknown), ap, cfg.gamma,
                              cfg.iou_gate, cfg.base_unknown_threshold)
        equal &= as_dicts(got) == want
        preserved &= got.annotations[:len(known.annotations)] == tuple(
            sorted(known.annotations, key=lambda a: a.id))
    elapsed = time.perf_counter() - t0
    verdict(2, {"oracle": equal, "known preserved": preserved, "runtime<10s": elapsed < 10},
            f"500 instances, {elapsed:.2f}s")


def test_criterion_03_cce_balance(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    balanced = True
    for trial in range(200):
        counts = {c: int(rng.integers(1, 60)) for c in range(1, int(rng.integers(2, 9)))}
        lib = toy_library(counts)
        target = cce.round_half_up(sum(counts.values()) / len(counts))
        out = cce.balance_library(lib, seed=trial)
        balanced &= all(n == target for n in out.frequencies.values())
    lib = parasite_library()
    total = len(lib)
    pct = {c.name: 100.0 * lib.frequencies[c.id] / total for c in lib.categories if c.id}
    names = list(PARASITE_TABLE_PERCENT)
    # the table prints the last two classes in swapped columns, so those two
    # are compared as a pair
    per_name = all(abs(pct[n] - PARASITE_TABLE_PERCENT[n]) <= 0.01 for n in names[:4])
    as_multiset = all(abs(a - b) <= 0.01 for a, b in zip(
        sorted(pct.values()), sorted(PARASITE_TABLE_PERCENT.values())))
    elapsed = time.perf_counter() - t0
    verdict(3, {
        "200 libraries balanced": balanced,
        "f_target": abs(lib.f_target - 60.667) <= 5e-4,
        "percentages (first four by name)": per_name,
        "percentages (all six as a set)": as_multiset,
        "runtime<10s": elapsed < 10,
    }, f"f_target={lib.f_target:.4f}, {elapsed:.2f}s")


def test_criterion_04_blend(verdict):
    t0 = time.perf_counter()
    a = np.repeat(np.arange(256, dtype=np.uint8), 256)
    b = np.tile(np.arange(256, dtype=np.uint8), 256)
    fg = RasterImage(np.stack([a, b, a], axis=1).reshape(256, 256, 3))
    bg = RasterImage(np.stack([b, a, b], axis=1).reshape(256, 256, 3))
    mid = blend_region(bg, fg, (0, 0), 0.5).pixels.astype(int).reshape(-1, 3)
    exact = np.stack([a, b, a], 1).astype(int) + np.stack([b, a, b], 1).astype(int)
    lo = np.minimum(np.stack([a, b, a], 1), np.stack([b, a, b], 1))
    hi = np.maximum(np.stack([a, b, a], 1), np.stack([b, a, b], 1))
    elapsed = time.perf_counter() - t0
    verdict(4, {
        "midpoint": bool(np.all(np.abs(mid - exact / 2) <= 0.5)),
        "bounds": bool(np.all((mid >= lo) & (mid <= hi))),
        "beta=1": blend_region(bg, fg, (0, 0), 1.0) == fg,
        "beta=0": blend_region(bg, fg, (0, 0), 0.0) == bg,
        "runtime<5s": elapsed < 5,
    }, f"65536 channel pairs, {elapsed:.2f}s")


def test_criterion_05_ema(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    x = ParamVector(rng.normal(size=1000), "v")
    state = EmaState(0.999, x)
    for _ in range(50):
        state = ema_update(state, x)
    fixed = float(np.max(np.abs(state.current.values - x.values)))
    contraction = 0.0
    for alpha in (0.5, 0.9, 0.999):
        student = ParamVector(rng.normal(size=1000), "v")
        state = EmaState(alpha, ParamVector(rng.normal(size=1000), "v"))
        gap0 = state.current.values - student.values
        for k in range(1, 51):
            state = ema_update(state, student)
            err = np.abs(state.current.values - student.values - alpha ** k * gap0)
            contraction = max(contraction, float(err.max()))
    elapsed = time.perf_counter() - t0
    verdict(5, {"fixed point": fixed <= 1e-9, "contraction": contraction <= 1e-9,
                "runtime<1s": elapsed < 1},
            f"max errors {fixed:.1e} / {contraction:.1e}, {elapsed:.3f}s")


def test_criterion_06_ap_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    mismatches = 0
    invariant = True
    for _ in range(1000):
        gt, pred = ap_instance(rng)
        got = average_precision(gt, pred, 1)
        mismatches += got != float(ap_oracle(*oracle_inputs(gt, pred, 1)))
        moved = pred.with_annotations([a.__class__(a.id, a.image_id, a.category_id, a.bbox,
                                                   math.sqrt(a.score) / 3)
                                       for a in pred.annotations])
        invariant &= average_precision(gt, moved, 1) == got
    elapsed = time.perf_counter() - t0
    verdict(6, {"oracle": mismatches == 0, "monotone invariance": invariant,
                "runtime<30s": elapsed < 30},
            f"{mismatches} of 1000 differ from the exact oracle, {elapsed:.2f}s")


@pytest.fixture(scope="module")
def ablation():
    """Five-seed ablation of the default config plus per-run loss checks."""
    worst = {"loss": 0.0}
    seed_time = {}
    clock = {"t": time.perf_counter()}

    def on_run(seed, variant, result):
        for r in result.losses:
            worst["loss"] = max(worst["loss"], abs(r.L - (r.L_s + r.lam * r.L_u)),
                                abs(r.L_s - (r.L_cls + r.L_loc)),
                                abs(r.L_u - (r.L_consistency + r.L_pseudo)))
        worst.setdefault("reports", 0)
        worst["reports"] += len(result.losses)
        if variant == VARIANTS[-1]:
            now = time.perf_counter()
            seed_time[seed] = now - clock["t"]
            clock["t"] = now

    report = run_ablation(RunConfig(), SEEDS, on_run=on_run)
    return report, worst, seed_time


def test_criterion_07_loss_identities(verdict, ablation):
    _, worst, _ = ablation
    verdict(7, {"identities": worst["loss"] <= 1e-9, "reports logged": worst["reports"] > 0},
            f"{worst['reports']} reports, max residual {worst['loss']:.1e}")


def test_criterion_08_ablation_direction(verdict, ablation):
    report, _, seed_time = ablation
    m = report.medians("map")
    rare = report.medians("rare_ap")
    slowest = max(seed_time.values())
    with_table = "; ".join(f"{v}={m[v]:.4f}" for v in VARIANTS)
    verdict(8, {
        "cce+oodfc > baseline": m["cce+oodfc"] > m["baseline"],
        "cce >= baseline": m["cce"] >= m["baseline"],
        "oodfc >= baseline": m["oodfc"] >= m["baseline"],
        "rare AP up under cce": rare["cce"] > rare["baseline"],
        "runtime<5min/seed": slowest < 300,
    }, f"median mAP50 {with_table}; rare AP {rare['baseline']:.4f} -> {rare['cce']:.4f}; "
       f"slowest seed {slowest:.0f}s")


def test_criterion_09_open_set_interference(verdict, ablation):
    report, _, _ = ablation
    unk = report.medians("unknown_as_majority")
    verdict(9, {"oodfc < baseline": unk["oodfc"] < unk["baseline"]},
            f"median unknown objects predicted as majority: baseline {unk['baseline']:.0f}, "
            f"oodfc {unk['oodfc']:.0f}")


def _tree(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(verdict, tmp_path, capsys):
    trees = []
    for name in ("first", "second"):
        argv = ["simulate", "--seeds", "1,2", "--iterations", "25", "--pseudo-logs",
                "--dump-world", "--out", str(tmp_path / name)]
        with capsys.disabled():
            code = cli.main(argv)
        assert code == 0
        trees.append(_tree(tmp_path / name))
    report = json.loads(trees[0]["report.json"])
    verdict(10, {"identical files": trees[0] == trees[1],
                 "report present": report["seeds"] == [1, 2]},
            f"{len(trees[0])} files compared byte for byte")
