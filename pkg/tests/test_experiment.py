import shutil

import numpy as np
import pytest

from jsynth import experiment as X
from jsynth import metrics
from jsynth.data import read_fold_plans, write_dataset, generate_phantom

TINY = """
# six subjects, three folds, one epoch
dataset = data
out = run
seeds = 0, 1
regimes = unimodal, offline, joint
n_folds = 3
n_test = 2
n_val = 1
n_permutations = 200
epochs = 1
batch_size = 2
lr = 0.002
depth = 1
base_filters = 2
slice_size = 16, 16
phantom.n_subjects = 6
phantom.slices = 2
phantom.size = 16, 16
phantom.lesion_radius = 1.0, 2.0
joint.lambda_seg = 0.5
"""


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    root = tmp_path_factory.mktemp("cv")
    (root / "exp.conf").write_text(TINY)
    cfg = X.load_config(root / "exp.conf")
    write_dataset(generate_phantom(cfg.phantom), cfg.dataset)
    rep = X.run_cross_validation(cfg)
    return cfg, rep


def test_parse_config_values(tmp_path):
    (tmp_path / "a.conf").write_text(TINY)
    cfg = X.load_config(tmp_path / "a.conf")
    assert cfg.dataset == tmp_path / "data"
    assert cfg.seeds == (0, 1)
    assert cfg.phantom.size == (16, 16) and cfg.phantom.lesion_radius == (1.0, 2.0)
    assert cfg.train.lr == 0.002 and cfg.train.slice_size == (16, 16)
    assert cfg.train_config("joint", 3).lambda_seg == 0.5
    assert cfg.train_config("offline", 3).lambda_seg == 1.0
    assert cfg.train_config("offline", 3).seed == 3


def test_dump_config_roundtrip(tmp_path):
    cfg = X.parse_config(TINY, tmp_path)
    again = X.parse_config(X.dump_config(cfg))
    assert X.dump_config(again) == X.dump_config(cfg)
    assert again.overrides == cfg.overrides and again.phantom == cfg.phantom


@pytest.mark.parametrize("text, msg", [
    ("epochs 3", "key = value"),
    ("color = red", "unknown key"),
    ("epochs = many", "bad value"),
    ("phantom.colour = 1", "unknown phantom field"),
    ("gan.epochs = 3", "bad value"),
    ("joint.bogus = 3", "unknown training field"),
])
def test_parse_config_errors(text, msg):
    with pytest.raises(X.ConfigError, match=msg):
        X.parse_config(text)


def test_config_validation():
    with pytest.raises(X.ConfigError):
        X.parse_config("regimes = offline, joint").validate()     # baseline not enabled
    with pytest.raises(X.ConfigError):
        X.parse_config("batch_size = 1").validate()
    X.parse_config("").validate()


def test_bad_cohort_is_rejected_before_training(tmp_path):
    cfg = X.parse_config(TINY.replace("n_test = 2", "n_test = 3"), tmp_path)
    write_dataset(generate_phantom(cfg.phantom), cfg.dataset)
    with pytest.raises(X.DataValidationError, match="folds"):
        X.run_cross_validation(cfg)
    assert not (tmp_path / "run" / "seed_0" / "fold_0").exists()


def test_layout(finished):
    cfg, _ = finished
    out = cfg.out
    assert (out / "config.txt").exists()
    for seed in (0, 1):
        plans = read_fold_plans(out / f"seed_{seed}" / "folds.csv")
        assert sorted(s for p in plans for s in p.test) == [f"sub{i:03d}" for i in range(6)]
        for k in range(3):
            for r in ("unimodal", "offline", "joint"):
                d = out / f"seed_{seed}" / f"fold_{k}" / r
                assert (d / "done").exists()
                assert (d / "classifier.jsyn").exists()
                assert (d / "generator.jsyn").exists() == (r != "unimodal")
                assert (d / "losses.csv").read_text().startswith("epoch,l_c,l_g_l2,l_g_seg,val_dice\n")
                assert len((d / "losses.csv").read_text().splitlines()) == 3
                for sid in plans[k].test:
                    assert (d / "predictions" / f"{sid}_pred.mvol").exists()


def test_rows_and_reaggregation(finished):
    cfg, rep = finished
    rows = metrics.read_subject_csv(cfg.out / "per_subject.csv")
    assert len(rows) == 2 * 3 * 6
    per_seed = metrics.read_subject_csv(cfg.out / "seed_0" / "per_subject.csv")
    assert len(per_seed) == 3 * 6
    summary = metrics.read_summary_csv(cfg.out / "summary.csv")
    assert list(summary) == ["unimodal", "offline", "joint"]
    for m in summary:
        for f in ("dsc", "fpr", "fnr", "mae", "psnr"):
            vals = [getattr(r, f) for r in rows if r.method == m and getattr(r, f) is not None]
            expect = float(np.mean(vals)) if vals else None
            assert summary[m][f"mean_{f}"] == expect
    assert summary["unimodal"]["mean_mae"] is None
    assert rep.means["joint"]["dsc"] == summary["joint"]["mean_dsc"]


def test_resume_reproduces_deleted_fold_bitwise(finished):
    cfg, _ = finished
    fold = cfg.out / "seed_1" / "fold_2"
    before = {p.relative_to(fold): p.read_bytes() for p in fold.rglob("*") if p.is_file()}
    summary = (cfg.out / "summary.csv").read_bytes()
    shutil.rmtree(fold)
    assert "seed 1 fold 2 joint" in X.missing_tasks(cfg)
    X.run_cross_validation(cfg)
    after = {p.relative_to(fold): p.read_bytes() for p in fold.rglob("*") if p.is_file()}
    assert before == after
    assert (cfg.out / "summary.csv").read_bytes() == summary


def test_report(finished):
    cfg, rep = finished
    X.report(cfg.out)
    t1 = (cfg.out / "table1.txt").read_text().splitlines()
    assert len(t1) == 2 + 3 + 1          # header, rule, one row per regime, footnote
    body = [line for line in (cfg.out / "table1.csv").read_text().splitlines()[1:]]
    assert len(body) == 3
    for line in body:
        method = line.split(",")[0]
        for f, cell in zip(("dsc", "fpr", "fnr"), line.split(",")[1:]):
            p = rep.pvalues[method][f]
            assert cell.endswith("*") == (p is not None and p < 0.005)
    assert len((cfg.out / "table2.csv").read_text().splitlines()) == 3
    ov = (cfg.out / "overlays" / "overlays.csv").read_text().splitlines()
    assert len(ov) == 1 + 3 * 3
    for line in ov[1:]:
        *_, tp, fp, fn, ctp, cfp, cfn = line.split(",")
        assert (tp, fp, fn) == (ctp, cfp, cfn)
    img = metrics.read_ppm(cfg.out / "overlays" / "highest_joint.ppm")
    assert img.shape == (16, 16, 3)


def test_star_iff_significant(tmp_path):
    rows = [metrics.SubjectRow(m, f"s{i}", d + 0.001 * i, 0.1, 0.2)
            for i in range(10) for m, d in (("unimodal", 0.5), ("joint", 0.6), ("offline", 0.5))]
    rows += [metrics.SubjectRow("offline", "s0", 0.4, 0.1, 0.2)]
    rep = metrics.build_report(rows[:-1], n_permutations=2000)
    X.write_tables(rep, tmp_path)
    table = {line.split(",")[0]: line.split(",")[1:] for line in (tmp_path / "table1.csv").read_text().splitlines()}
    assert table["joint"][0].endswith("*")
    assert not table["offline"][0].endswith("*")
    assert not table["unimodal"][0].endswith("*")


def test_report_lists_missing_folds(finished, tmp_path):
    cfg, _ = finished
    copy = tmp_path / "copy"
    shutil.copytree(cfg.out, copy)
    shutil.rmtree(copy / "seed_0" / "fold_1" / "offline")
    with pytest.raises(X.IncompleteResultsError, match="seed 0 fold 1 offline"):
        X.report(copy)


def test_parallel_matches_sequential(finished, tmp_path, monkeypatch):
    cfg, _ = finished
    from dataclasses import replace
    par = replace(cfg, out=tmp_path / "par", seeds=(0,))
    monkeypatch.setenv("JSYNTH_THREADS", "2")
    X.run_cross_validation(par)
    for k in range(3):
        for r in ("unimodal", "joint"):
            a = (cfg.out / "seed_0" / f"fold_{k}" / r / "classifier.jsyn").read_bytes()
            assert a == (par.out / "seed_0" / f"fold_{k}" / r / "classifier.jsyn").read_bytes()
