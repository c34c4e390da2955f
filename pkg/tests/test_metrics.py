import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jsynth import metrics as M
from jsynth.metrics import ConfusionCounts


def example_pair():
    truth = np.zeros((1, 3, 3))
    truth[0, 0, :] = 1
    truth[0, 1, 0] = 1           # 4 positives
    pred = np.zeros((1, 3, 3))
    pred[0, 0, :2] = 1           # 2 overlap
    pred[0, 2, 2] = 1            # 1 false positive
    return pred, truth


def test_confusion_example():
    c = M.confusion(*example_pair())
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 2, 4)


def test_confusion_identity_and_complement():
    t = (np.random.default_rng(0).random((2, 4, 4)) < 0.3).astype(float)
    c = M.confusion(t, t)
    assert c.fp == c.fn == 0
    c = M.confusion(1 - t, t)
    assert c.tp == c.tn == 0


def test_confusion_errors():
    with pytest.raises(ValueError):
        M.confusion(np.full((2, 2), 0.5), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        M.confusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dice_example():
    assert M.dice(ConfusionCounts(2, 1, 2, 0)) == 4 / 7


def test_dice_edges():
    assert M.dice(ConfusionCounts(5, 0, 0, 3)) == 1.0
    assert M.dice(ConfusionCounts(0, 3, 4, 1)) == 0.0
    assert M.dice(ConfusionCounts(0, 0, 0, 9)) == 1.0


def test_rates_example():
    c = ConfusionCounts(2, 1, 2, 0)
    assert M.fpr(c) == 0.25
    assert M.fnr(c) == 0.5


def test_rates_edges():
    assert (M.fpr(ConfusionCounts(4, 0, 0, 1)), M.fnr(ConfusionCounts(4, 0, 0, 1))) == (0.0, 0.0)
    assert (M.fpr(ConfusionCounts(0, 0, 4, 1)), M.fnr(ConfusionCounts(0, 0, 4, 1))) == (0.0, 1.0)
    assert M.fpr(ConfusionCounts(0, 3, 0, 1)) is None
    assert M.fnr(ConfusionCounts(0, 3, 0, 1)) is None
    assert M.fpr(ConfusionCounts(1, 5, 1, 0)) == 2.5


def test_mae_examples():
    assert M.mae([0.0, 1.0, 2.0], [1.0, 1.0, 1.0]) == 2 / 3
    a = np.random.default_rng(1).normal(size=(2, 3, 3))
    assert M.mae(a, a) == 0.0
    mask = a > 0
    assert M.mae(a, a + 0.5, mask) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        M.mae(a, a, np.zeros_like(a))


def test_psnr_examples():
    a = np.array([0.0, 4.0, 2.0, 2.0])
    b = a + np.array([1.0, -1.0, 1.0, -1.0])          # MSE 1, peak 4
    assert M.psnr(a, b) == pytest.approx(10 * math.log10(16), abs=1e-12)
    assert M.psnr(a, b) == pytest.approx(12.0412, abs=1e-4)
    c = a + (b - a) / math.sqrt(2)                    # MSE halved
    assert M.psnr(a, c) - M.psnr(a, b) == pytest.approx(10 * math.log10(2), abs=1e-12)
    assert M.psnr(a, c) - M.psnr(a, b) == pytest.approx(3.0103, abs=1e-4)
    assert M.psnr(a, a) == 99.0


def test_psnr_errors():
    with pytest.raises(ValueError):
        M.psnr(np.ones(4), np.zeros(4))
    with pytest.raises(ValueError):
        M.psnr(np.arange(4.0), np.arange(4.0), np.zeros(4))


def enumerate_p(a, b):
    d = np.asarray(a) - np.asarray(b)
    obs = abs(d.mean())
    stats = [abs(np.mean(np.array(s) * d)) for s in itertools.product((1, -1), repeat=len(d))]
    return sum(t >= obs - 1e-12 for t in stats) / len(stats)


def test_permutation_exact_for_three_pairs():
    a, b = [0.9, 0.7, 0.8], [0.5, 0.6, 0.85]
    assert M.permutation_test(a, b) == enumerate_p(a, b)
    assert M.permutation_test([3.0, 2.0, 5.0], [1.0, 1.0, 1.0]) == 2 / 8


def test_permutation_identical_and_symmetric():
    a = [0.1, 0.5, 0.3, 0.9]
    assert M.permutation_test(a, a) == 1.0
    rng = np.random.default_rng(0)
    x, y = rng.random(20), rng.random(20)
    assert M.permutation_test(x, y, 2000, seed=3) == M.permutation_test(y, x, 2000, seed=3)


def test_permutation_monte_carlo():
    rng = np.random.default_rng(1)
    x = rng.random(30)
    y = x - 0.2 - 0.01 * rng.random(30)
    p = M.permutation_test(x, y, 999, seed=0)
    assert p == 1 / 1000                              # add-one floor
    assert M.permutation_test(x, y, 999, seed=0) == p
    z = x + rng.normal(0, 0.1, 30)
    assert 0 < M.permutation_test(x, z, 999, seed=0) <= 1


def test_permutation_errors():
    with pytest.raises(ValueError):
        M.permutation_test([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        M.permutation_test([1], [2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=2, max_size=9), st.randoms())
def test_permutation_invariant_to_pair_order(pairs, rnd):
    a, b = zip(*pairs)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    c, d = zip(*shuffled)
    p = M.permutation_test(a, b)
    assert 0 <= p <= 1
    assert p == M.permutation_test(c, d)
    assert p == enumerate_p(a, b)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    p = (rng.random((3, 5)) < rng.random()).astype(float)
    t = (rng.random((3, 5)) < rng.random()).astype(float)
    c, r = M.confusion(p, t), M.confusion(t, p)
    assert c.tp + c.fp + c.fn + c.tn == 15
    assert M.dice(c) == M.dice(r)
    assert 0 <= M.dice(c) <= 1
    if c.tp + c.fp + c.fn:
        assert M.dice(c) == pytest.approx(1 - (c.fp + c.fn) / (2 * c.tp + c.fp + c.fn), abs=1e-15)
    if M.fnr(c) is not None:
        assert 0 <= M.fnr(c) <= 1 and M.fpr(c) >= 0


def test_fpr_fnr_not_symmetric():
    c, r = M.confusion(*example_pair()), M.confusion(*example_pair()[::-1])
    assert (M.fpr(c), M.fnr(c)) != (M.fpr(r), M.fnr(r))


# ---------------------------------------------------------------- overlays


def test_overlay_single_tp():
    t = np.zeros((4, 4))
    t[1, 2] = 1
    img = M.render_overlay(t, t, np.random.default_rng(0).random((4, 4)))
    assert M.color_counts(img) == {"tp": 1, "fp": 0, "fn": 0}
    assert tuple(img[1, 2]) == (0, 0, 255)


def test_overlay_single_fp_and_fn_colors():
    p, t = np.zeros((3, 3)), np.zeros((3, 3))
    p[0, 0] = 1
    img = M.render_overlay(p, t, np.zeros((3, 3)))
    assert M.color_counts(img) == {"tp": 0, "fp": 1, "fn": 0}
    assert tuple(img[0, 0]) == (0, 255, 0)
    img = M.render_overlay(t, p, np.zeros((3, 3)))
    assert tuple(img[0, 0]) == (255, 255, 0)


def test_overlay_background_scaling():
    bg = np.array([[0.0, 1.0], [2.0, 4.0]])
    img = M.render_overlay(np.zeros((2, 2)), np.zeros((2, 2)), bg)
    assert img[..., 0].tolist() == [[0, 64], [128, 255]]
    assert np.array_equal(img[..., 0], img[..., 2])


def test_overlay_counts_match_confusion():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = (rng.random((16, 16)) < 0.2).astype(float)
        t = (rng.random((16, 16)) < 0.2).astype(float)
        c = M.confusion(p, t)
        assert M.color_counts(M.render_overlay(p, t, rng.random((16, 16)))) == {"tp": c.tp, "fp": c.fp, "fn": c.fn}


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    M.write_ppm(img, tmp_path / "x.ppm")
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(M.read_ppm(tmp_path / "x.ppm"), img)


# ---------------------------------------------------------------- reports


def rows_fixture():
    rows = []
    for i in range(4):
        rows.append(M.SubjectRow("unimodal", f"s{i}", 0.5 + 0.01 * i, 0.4, 0.5))
        rows.append(M.SubjectRow("joint", f"s{i}", 0.6 + 0.02 * i, 0.2 if i else None, 0.3, 0.25, 11.0 + i))
    return rows


def test_report_means_and_pvalues():
    rep = M.build_report(rows_fixture())
    assert rep.methods() == ["unimodal", "joint"]
    assert rep.means["joint"]["dsc"] == pytest.approx(np.mean([0.6, 0.62, 0.64, 0.66]), abs=1e-15)
    assert rep.means["joint"]["fpr"] == pytest.approx(0.2)       # absent value excluded
    assert rep.means["unimodal"]["mae"] is None
    assert rep.pvalues["unimodal"]["dsc"] is None
    assert rep.pvalues["joint"]["dsc"] == 1 / 8                  # all 4 differences positive, 2 of 16 patterns
    assert all(p is None or 0 <= p <= 1 for m in rep.pvalues.values() for p in m.values())


def test_csv_roundtrip_and_reaggregation(tmp_path):
    rows = rows_fixture()
    M.write_subject_csv(rows, tmp_path / "per_subject.csv")
    assert (tmp_path / "per_subject.csv").read_text().splitlines()[0] == "method,subject,dsc,fpr,fnr,mae,psnr"
    back = M.read_subject_csv(tmp_path / "per_subject.csv")
    assert back == rows
    rep = M.build_report(back)
    M.write_summary_csv(rep, tmp_path / "summary.csv")
    summary = M.read_summary_csv(tmp_path / "summary.csv")
    for m in ("unimodal", "joint"):
        vals = [r.dsc for r in back if r.method == m]
        assert summary[m]["mean_dsc"] == float(np.mean(vals))
    assert summary["joint"]["p_dsc_vs_baseline"] == 1 / 8
