"""End-to-end acceptance checks; each prints one PASS/FAIL line in the terminal summary.

The phantom cross-validation (criteria 5 to 7) trains 27 full-size models
twice and takes the better part of an hour on one CPU core.
"""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from jsynth import experiment as X
from jsynth import gradcheck, metrics, nets
from jsynth import train as TR
from jsynth.data import generate_phantom, plan_folds, preprocess_subject, write_dataset

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.conf"


def record(n, ok, detail):
    ACCEPTANCE.append(f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
    print(ACCEPTANCE[-1])
    assert ok, detail


@pytest.fixture(scope="module")
def desk():
    cfg = X.load_config(DESK_CONFIG)
    subjects = [preprocess_subject(s) for s in generate_phantom(cfg.phantom)]
    return cfg, subjects


def test_criterion_1_gradient_checks():
    start = time.perf_counter()
    results = gradcheck.run_suite(gradcheck.SEEDS)
    elapsed = time.perf_counter() - start
    bad = [r.line() for r in results if not r.passed]
    per_op = {}
    for r in results:
        per_op.setdefault(r.name, set()).add(r.shape)
    few = [k for k, shapes in per_op.items() if len(shapes) < 3]
    worst = max(r.error for r in results)
    ok = not bad and not few and elapsed < 120
    record(1, ok, f"{len(results)} checks over {len(per_op)} ops, worst rel err {worst:.2e}, "
                  f"{elapsed:.0f}s{'; failing: ' + ', '.join(bad) if bad else ''}")


def test_criterion_2_lambda_zero_trajectory(desk):
    cfg, subjects = desk
    start = time.perf_counter()
    fold = plan_folds([s.id for s in subjects], cfg.n_folds, cfg.n_test, cfg.n_val, 0)[0]
    kw = dict(epochs=10, max_batches=10, trace=True, lambda_seg=0.0)
    joint = TR.train_joint(subjects, fold, replace(cfg.train_config("joint", 0), **kw))
    offline = TR.train_offline(subjects, fold, replace(cfg.train_config("offline", 0), **kw))
    elapsed = time.perf_counter() - start
    same = len(joint.trace) == 10 and joint.trace == offline.trace
    record(2, same and elapsed < 60,
           f"{len(joint.trace)} generator digests, trajectories {'equal' if same else 'differ'}, {elapsed:.0f}s")


def test_criterion_3_joint_gradient_is_live(desk):
    cfg, subjects = desk
    fold = plan_folds([s.id for s in subjects], cfg.n_folds, cfg.n_test, cfg.n_val, 0)[0]
    tc = cfg.train_config("joint", 0)
    train, _ = TR._prepare(subjects, fold, tc)
    idx = np.arange(tc.batch_size)
    G = nets.build_generator(nets.generator_config(tc.depth, tc.base_filters), 0)
    C = nets.build_classifier(nets.classifier_config(2, tc.depth, tc.base_filters), 1)
    args = (train.t1[idx], train.flair[idx], train.label[idx])
    g1 = TR.generator_gradients(G, C, *args, 1.0)
    g0 = TR.generator_gradients(G, None, *args, 0.0)
    diff = math.sqrt(sum(float(np.sum((a - b) ** 2)) for a, b in zip(g1, g0)))
    record(3, diff > 1e-12, f"||grad(L2 + BCE) - grad(L2)|| = {diff:.3e}")


def _metric_oracles():
    truth = np.zeros((1, 3, 3))
    truth[0, 0, :] = 1
    truth[0, 1, 0] = 1
    pred = np.zeros((1, 3, 3))
    pred[0, 0, :2] = 1
    pred[0, 2, 2] = 1
    c = metrics.confusion(pred, truth)
    checks = {
        "confusion tp=2 fp=1 fn=2": (c.tp, c.fp, c.fn) == (2, 1, 2),
        "pred==truth": metrics.confusion(truth, truth).fp == metrics.confusion(truth, truth).fn == 0,
        "pred=not truth": (lambda k: k.tp == k.tn == 0)(metrics.confusion(1 - truth, truth)),
        "dice 4/7": metrics.dice(c) == 4 / 7,
        "dice perfect": metrics.dice(metrics.confusion(truth, truth)) == 1.0,
        "dice disjoint": metrics.dice(metrics.ConfusionCounts(0, 2, 3, 0)) == 0.0,
        "dice both empty": metrics.dice(metrics.ConfusionCounts(0, 0, 0, 9)) == 1.0,
        "fpr 0.25": metrics.fpr(c) == 0.25,
        "fnr 0.5": metrics.fnr(c) == 0.5,
        "fpr/fnr perfect": (metrics.fpr(metrics.ConfusionCounts(3, 0, 0, 1)),
                            metrics.fnr(metrics.ConfusionCounts(3, 0, 0, 1))) == (0.0, 0.0),
        "fpr/fnr empty pred": (metrics.fpr(metrics.ConfusionCounts(0, 0, 3, 1)),
                               metrics.fnr(metrics.ConfusionCounts(0, 0, 3, 1))) == (0.0, 1.0),
        "mae 2/3": metrics.mae([0.0, 1.0, 2.0], [1.0, 1.0, 1.0]) == 2 / 3,
        "mae identical": metrics.mae(truth, truth) == 0.0,
        "mae shift 0.5": metrics.mae([0.5, 1.5, 2.5], [1.0, 2.0, 3.0]) == 0.5,
        "psnr cap": metrics.psnr([0.0, 4.0], [0.0, 4.0]) == 99.0,
        "psnr peak 4 mse 1": abs(metrics.psnr([0.0, 4.0, 2.0, 2.0], [1.0, 3.0, 3.0, 1.0]) - 10 * math.log10(16)) < 1e-12,
    }
    a = np.array([0.0, 4.0, 2.0, 2.0])
    e = np.array([1.0, -1.0, 1.0, -1.0])
    gain = metrics.psnr(a, a + e / math.sqrt(2)) - metrics.psnr(a, a + e)
    checks["psnr +3.0103 dB per MSE halving"] = abs(gain - 10 * math.log10(2)) < 1e-12 and round(gain, 4) == 3.0103
    x, y = [0.9, 0.7, 0.8], [0.5, 0.6, 0.85]
    d = np.subtract(x, y)
    signs = np.array(np.meshgrid(*[[1, -1]] * 3)).reshape(3, -1).T
    exact = np.mean(np.abs(signs @ d) >= abs(d.sum()) - 1e-12)
    checks["permutation p exact vs 2^3 enumeration"] = metrics.permutation_test(x, y) == exact
    checks["permutation identical -> 1"] = metrics.permutation_test(x, x) == 1.0
    checks["permutation symmetric"] = metrics.permutation_test(x, y) == metrics.permutation_test(y, x)
    one = np.zeros((4, 4))
    one[2, 1] = 1
    checks["overlay single TP"] = metrics.color_counts(metrics.render_overlay(one, one, np.ones((4, 4)))) == \
        {"tp": 1, "fp": 0, "fn": 0}
    checks["overlay single FP"] = metrics.color_counts(metrics.render_overlay(one, 0 * one, np.ones((4, 4)))) == \
        {"tp": 0, "fp": 1, "fn": 0}
    return checks


def test_criterion_4_metric_oracles():
    start = time.perf_counter()
    checks = _metric_oracles()
    elapsed = time.perf_counter() - start
    failed = [k for k, v in checks.items() if not v]
    record(4, not failed and elapsed < 10,
           f"{len(checks) - len(failed)}/{len(checks)} oracle examples exact, {elapsed:.2f}s"
           + (f"; failing: {', '.join(failed)}" if failed else ""))


def test_criterion_8_fold_plans():
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(1000):
        n_folds, n_test = int(rng.integers(1, 11)), int(rng.integers(1, 11))
        n = n_folds * n_test
        if n - n_test < 1:
            n_folds, n = n_folds + 1, n + n_test
        n_val = int(rng.integers(0, n - n_test))
        ids = [f"s{i}" for i in range(n)]
        plans = plan_folds(ids, n_folds, n_test, n_val, int(rng.integers(2 ** 32)))
        tested = []
        for p in plans:
            tr, va, te = set(p.train), set(p.val), set(p.test)
            bad += bool(tr & va or tr & te or va & te or (tr | va | te) != set(ids))
            tested += p.test
        bad += sorted(tested) != sorted(ids)
    sixty = plan_folds([f"s{i}" for i in range(60)], 6, 10, 5, 0)
    arith = all((len(p.test), len(p.val), len(p.train)) == (10, 5, 45) for p in sixty) and len(sixty) == 6
    elapsed = time.perf_counter() - start
    record(8, bad == 0 and arith and elapsed < 5,
           f"1000 random plans, {bad} violations, 60/6/10/5/45 {'holds' if arith else 'broken'}, {elapsed:.2f}s")


def test_criterion_9_overlay_fidelity(desk):
    _, subjects = desk
    rng = np.random.default_rng(9)
    mismatches, colors_ok = 0, True
    for _ in range(20):
        s = subjects[rng.integers(len(subjects))]
        z = rng.integers(s.label.dims[0])
        truth = s.label.voxels[z]
        pred = np.where(rng.random(truth.shape) < 0.1, 1 - truth, truth)   # flip 10% of voxels
        img = metrics.render_overlay(pred, truth, s.flair.voxels[z])
        c = metrics.confusion(pred, truth)
        mismatches += metrics.color_counts(img) != {"tp": c.tp, "fp": c.fp, "fn": c.fn}
        p, t = pred > 0, truth > 0
        colors_ok &= bool(np.all(img[p & t] == (0, 0, 255)) and np.all(img[p & ~t] == (0, 255, 0))
                          and np.all(img[~p & t] == (255, 255, 0)))
    record(9, mismatches == 0 and colors_ok,
           f"20 slices, {mismatches} count mismatches, caption colours {'match' if colors_ok else 'wrong'}")


# ---------------------------------------------------------------- phantom experiment


@pytest.fixture(scope="module")
def phantom_runs(tmp_path_factory):
    """Criterion-5 experiment run twice from scratch into separate directories."""
    root = tmp_path_factory.mktemp("acceptance")
    cfg = X.load_config(DESK_CONFIG)
    cfg.dataset = root / "data"
    write_dataset(generate_phantom(cfg.phantom), cfg.dataset)
    runs, times = [], []
    for name in ("first", "second"):
        start = time.perf_counter()
        c = replace(cfg, out=root / name)
        rep = X.run_cross_validation(c)
        times.append(time.perf_counter() - start)
        runs.append((c, rep))
    return runs, times


def test_criterion_5_table1_direction(phantom_runs):
    runs, times = phantom_runs
    cfg, rep = runs[0]
    m = rep.means
    faint = X.load_config(DESK_CONFIG).phantom.faint_fraction
    dice_ok = m["joint"]["dsc"] > m["unimodal"]["dsc"]
    fpr_ok = m["joint"]["fpr"] < m["unimodal"]["fpr"]
    table = "; ".join(f"{k} DSC {m[k]['dsc']:.4f} FPR {m[k]['fpr']:.4f} FNR {m[k]['fnr']:.4f}" for k in rep.methods())
    record(5, dice_ok and fpr_ok and faint >= 0.3,
           f"seeds {list(cfg.seeds)}, {times[0] / 60:.1f} min; {table}")


def test_criterion_6_table2_direction(phantom_runs):
    runs, _ = phantom_runs
    m = runs[0][1].means
    mae_ok = m["joint"]["mae"] <= m["offline"]["mae"]
    psnr_ok = m["joint"]["psnr"] >= m["offline"]["psnr"]
    record(6, mae_ok and psnr_ok,
           f"MAE joint {m['joint']['mae']:.4f} vs offline {m['offline']['mae']:.4f}; "
           f"PSNR joint {m['joint']['psnr']:.3f} vs offline {m['offline']['psnr']:.3f} dB")


def _files(root: Path):
    keep = (".csv", ".jsyn", ".mvol")
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.suffix in keep}


def test_criterion_7_determinism(phantom_runs):
    (a, _), (b, _) = phantom_runs[0]
    fa, fb = _files(a.out), _files(b.out)
    differ = sorted(str(k) for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k))
    n_ckpt = sum(1 for k in fa if k.suffix == ".jsyn")
    record(7, not differ and n_ckpt > 0,
           f"{len(fa)} CSV/checkpoint/volume files compared ({n_ckpt} checkpoints), {len(differ)} differ")
