"""Cross-validation runs: config files, resumable per-fold tasks and reports."""

from __future__ import annotations

import csv
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import metrics, nets
from .data import (DataValidationError, FoldPlan, Modality, PhantomSpec, plan_folds,
                   preprocess_subject, read_dataset, read_fold_plans, read_volume, write_fold_plans,
                   write_volume)
from .train import Regime, TrainConfig, evaluate_subject, train

log = logging.getLogger(__name__)

DONE = "done"
CONFIG_COPY = "config.txt"
LOSS_FIELDS = ("epoch", "l_c", "l_g_l2", "l_g_seg", "val_dice")


class ConfigError(ValueError):
    pass


class IncompleteResultsError(RuntimeError):
    pass


# ---------------------------------------------------------------- configuration

_TRAIN_KEYS = ("epochs", "batch_size", "lr", "lambda_seg", "slice_size", "depth", "base_filters")


@dataclass
class ExperimentConfig:
    dataset: Path = Path("data")
    out: Path = Path("runs")
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    overrides: dict = field(default_factory=dict)   # regime -> {train key: value}
    regimes: tuple = (Regime.UNIMODAL, Regime.OFFLINE, Regime.JOINT)
    seeds: tuple = (0,)
    n_folds: int = 3
    n_test: int = 4
    n_val: int = 2
    baseline: str = "unimodal"
    n_permutations: int = 10000

    def train_config(self, regime, seed: int) -> TrainConfig:
        regime = Regime(regime)
        return replace(self.train, regime=regime, seed=seed, **self.overrides.get(regime.value, {}))

    def validate(self):
        if not self.regimes:
            raise ConfigError("at least one regime must be enabled")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.baseline not in [Regime(r).value for r in self.regimes]:
            raise ConfigError(f"baseline {self.baseline!r} is not an enabled regime")
        if self.n_folds < 1 or self.n_test < 1 or self.n_val < 0:
            raise ConfigError("n_folds and n_test must be >= 1, n_val >= 0")
        try:
            for r in self.regimes:
                self.train_config(r, 0).validate()
            self.phantom.validate(2 ** self.train.depth)
        except ValueError as e:
            raise ConfigError(str(e)) from e


def _ints(v):
    return tuple(int(x) for x in v.replace(",", " ").split())


def _floats(v):
    return tuple(float(x) for x in v.replace(",", " ").split())


_PHANTOM_TYPES = {"seed": int, "n_subjects": int, "slices": int, "size": _ints, "lesion_count": _ints,
                  "lesion_radius": _floats, "faint_fraction": float, "noise_sigma": float,
                  "flair_contrast": float, "t1_contrast": float, "mimic_count": _ints}
_TRAIN_TYPES = {"epochs": int, "batch_size": int, "lr": float, "lambda_seg": float, "slice_size": _ints,
                "depth": int, "base_filters": int}


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys ``phantom.<field>`` set PhantomSpec fields and ``<regime>.<field>``
    overrides a training field for one regime. Relative paths resolve
    against ``base_dir``.
    """
    cfg = ExperimentConfig()
    phantom, train_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("phantom."):
                name = key[len("phantom."):]
                if name not in _PHANTOM_TYPES:
                    raise ConfigError(f"unknown phantom field {name!r}")
                phantom[name] = _PHANTOM_TYPES[name](value)
            elif "." in key:
                regime, name = key.split(".", 1)
                Regime(regime)
                if name not in _TRAIN_TYPES:
                    raise ConfigError(f"unknown training field {name!r}")
                cfg.overrides.setdefault(regime, {})[name] = _TRAIN_TYPES[name](value)
            elif key in _TRAIN_TYPES:
                train_kw[key] = _TRAIN_TYPES[key](value)
            elif key in ("dataset", "out"):
                p = Path(value)
                setattr(cfg, key, p if p.is_absolute() or base_dir is None else base_dir / p)
            elif key == "regimes":
                cfg.regimes = tuple(Regime(r.strip()) for r in value.split(",") if r.strip())
            elif key == "seeds":
                cfg.seeds = _ints(value)
            elif key in ("n_folds", "n_test", "n_val", "n_permutations"):
                setattr(cfg, key, int(value))
            elif key == "baseline":
                cfg.baseline = value
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
    cfg.phantom = PhantomSpec(**phantom)
    cfg.train = TrainConfig(**train_kw)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parses back to an equal config (paths absolute)."""
    seq = lambda t: ", ".join(str(x) for x in t)  # noqa: E731
    lines = [f"dataset = {Path(cfg.dataset).resolve()}", f"out = {Path(cfg.out).resolve()}",
             f"regimes = {seq(Regime(r).value for r in cfg.regimes)}", f"seeds = {seq(cfg.seeds)}",
             f"baseline = {cfg.baseline}", f"n_folds = {cfg.n_folds}", f"n_test = {cfg.n_test}",
             f"n_val = {cfg.n_val}", f"n_permutations = {cfg.n_permutations}"]
    for k in _TRAIN_KEYS:
        v = getattr(cfg.train, k)
        lines.append(f"{k} = {seq(v) if isinstance(v, tuple) else repr(v)}")
    for f in fields(PhantomSpec):
        v = getattr(cfg.phantom, f.name)
        lines.append(f"phantom.{f.name} = {seq(v) if isinstance(v, tuple) else repr(v)}")
    for regime in sorted(cfg.overrides):
        for k, v in sorted(cfg.overrides[regime].items()):
            lines.append(f"{regime}.{k} = {seq(v) if isinstance(v, tuple) else repr(v)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- layout


def seed_dir(out, seed) -> Path:
    return Path(out) / f"seed_{seed}"


def task_dir(out, seed, fold, regime) -> Path:
    return seed_dir(out, seed) / f"fold_{fold}" / Regime(regime).value


def load_cohort(cfg: ExperimentConfig):
    """Load and normalize the dataset after checking the fold arithmetic."""
    subjects = read_dataset(cfg.dataset)
    n = len(subjects)
    if cfg.n_folds * cfg.n_test != n:
        raise DataValidationError(f"{n} subjects cannot be split into {cfg.n_folds} folds of {cfg.n_test} test subjects")
    if cfg.n_val >= n - cfg.n_test:
        raise DataValidationError(f"n_val={cfg.n_val} leaves no training subjects out of {n}")
    return [preprocess_subject(s) for s in subjects]


def _write_losses(curves, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_FIELDS)
        for c in curves:
            w.writerow(["" if getattr(c, f) is None else repr(getattr(c, f)) for f in LOSS_FIELDS])


def run_task(cfg: ExperimentConfig, subjects, plan: FoldPlan, seed: int, regime) -> Path:
    """Train one (seed, fold, regime) and write its outputs; skipped when already done."""
    regime = Regime(regime)
    dest = task_dir(cfg.out, seed, plan.fold, regime)
    if (dest / DONE).exists():
        log.info("seed %d fold %d %s: already done", seed, plan.fold, regime.value)
        return dest
    tmp = dest.with_name(dest.name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    (tmp / "predictions").mkdir(parents=True)
    log.info("seed %d fold %d %s: training", seed, plan.fold, regime.value)
    res = train(subjects, plan, cfg.train_config(regime, seed))
    nets.save_checkpoint(res.classifier, tmp / "classifier.jsyn")
    if res.generator is not None:
        nets.save_checkpoint(res.generator, tmp / "generator.jsyn")
    _write_losses(res.curves, tmp / "losses.csv")
    rows = []
    test = set(plan.test)
    for s in subjects:
        if s.id not in test:
            continue
        row, pred, synth = evaluate_subject(res, s, regime, cfg.train.slice_size)
        rows.append(row)
        write_volume(pred, tmp / "predictions" / f"{s.id}_pred.mvol")
        if synth is not None:
            write_volume(synth, tmp / "predictions" / f"{s.id}_synth.mvol")
    metrics.write_subject_csv(rows, tmp / "per_subject.csv")
    (tmp / "selected_epoch.txt").write_text(f"{res.selected_epoch}\n")
    (tmp / DONE).write_text("")
    shutil.rmtree(dest, ignore_errors=True)
    os.replace(tmp, dest)
    return dest


def _task_entry(args):
    cfg, subjects, plan, seed, regime = args
    return str(run_task(cfg, subjects, plan, seed, regime))


def _threads(default: int = 1) -> int:
    raw = os.environ.get("JSYNTH_THREADS")
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"JSYNTH_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("JSYNTH_THREADS must be >= 1")
    return n


def prepare_run(cfg: ExperimentConfig):
    """Validate everything and write config copy and fold plans; returns (subjects, plans per seed)."""
    cfg.validate()
    subjects = load_cohort(cfg)
    ids = [s.id for s in subjects]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_COPY).write_text(dump_config(cfg))
    plans = {}
    for seed in cfg.seeds:
        plans[seed] = plan_folds(ids, cfg.n_folds, cfg.n_test, cfg.n_val, seed)
        seed_dir(out, seed).mkdir(exist_ok=True)
        write_fold_plans(plans[seed], seed_dir(out, seed) / "folds.csv")
    return subjects, plans


def run_cross_validation(cfg: ExperimentConfig, threads: int | None = None) -> metrics.MetricsReport:
    subjects, plans = prepare_run(cfg)
    jobs = [(cfg, subjects, plan, seed, regime)
            for seed in cfg.seeds for plan in plans[seed] for regime in cfg.regimes]
    n = min(threads or _threads(), len(jobs))
    if n <= 1:
        for job in jobs:
            _task_entry(job)
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            list(pool.map(_task_entry, jobs))
    return aggregate(cfg)


# ---------------------------------------------------------------- aggregation


def missing_tasks(cfg: ExperimentConfig) -> list[str]:
    return [f"seed {s} fold {k} {Regime(r).value}"
            for s in cfg.seeds for k in range(cfg.n_folds) for r in cfg.regimes
            if not (task_dir(cfg.out, s, k, r) / DONE).exists()]


def _order(cfg):
    return {Regime(r).value: i for i, r in enumerate(cfg.regimes)}


def collect_rows(cfg: ExperimentConfig, seed: int) -> list[metrics.SubjectRow]:
    rows = []
    for k in range(cfg.n_folds):
        for r in cfg.regimes:
            rows += metrics.read_subject_csv(task_dir(cfg.out, seed, k, r) / "per_subject.csv")
    order = _order(cfg)
    return sorted(rows, key=lambda r: (order[r.method], r.subject))


def aggregate(cfg: ExperimentConfig) -> metrics.MetricsReport:
    """Per-seed and pooled per-subject and summary CSVs. Pooled subjects are keyed ``s<seed>/<id>``."""
    missing = missing_tasks(cfg)
    if missing:
        raise IncompleteResultsError("incomplete results, missing: " + "; ".join(missing))
    out = Path(cfg.out)
    pooled = []
    for seed in cfg.seeds:
        rows = collect_rows(cfg, seed)
        metrics.write_subject_csv(rows, seed_dir(out, seed) / "per_subject.csv")
        rep = metrics.build_report(rows, cfg.baseline, cfg.n_permutations, seed)
        metrics.write_summary_csv(rep, seed_dir(out, seed) / "summary.csv")
        pooled += [replace(r, subject=f"s{seed}/{r.subject}") for r in rows]
    order = _order(cfg)
    pooled.sort(key=lambda r: (order[r.method], r.subject))
    metrics.write_subject_csv(pooled, out / "per_subject.csv")
    rep = metrics.build_report(pooled, cfg.baseline, cfg.n_permutations, 0)
    metrics.write_summary_csv(rep, out / "summary.csv")
    return rep


# ---------------------------------------------------------------- report


def _cell(v, p=None, scale=1.0, digits=4):
    if v is None:
        return "-"
    star = "*" if p is not None and p < metrics.SIGNIFICANCE else ""
    return f"{v * scale:.{digits}f}{star}"


def _table(header, body):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    fmt = lambda row: "  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]) + "\n"


def write_tables(rep: metrics.MetricsReport, out: Path) -> None:
    """Segmentation and synthesis tables as text and CSV; '*' marks p < 0.005 against the baseline."""
    t1 = [[m] + [_cell(rep.means[m][f], rep.pvalues[m][f]) for f in ("dsc", "fpr", "fnr")]
          for m in rep.methods()]
    t2 = [[m, _cell(rep.means[m]["mae"]), _cell(rep.means[m]["psnr"], digits=2)]
          for m in rep.methods() if rep.means[m]["mae"] is not None]
    note = f"* significantly different from {rep.baseline} (paired permutation test, p < {metrics.SIGNIFICANCE})\n"
    (out / "table1.txt").write_text(_table(["method", "DSC", "FPR", "FNR"], t1) + note)
    (out / "table2.txt").write_text(_table(["method", "MAE", "PSNR(dB)"], t2))
    for name, header, body in (("table1.csv", ["method", "dsc", "fpr", "fnr"], t1),
                               ("table2.csv", ["method", "mae", "psnr"], t2)):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(body)


def select_slices(subjects, test_ids) -> dict[str, tuple[str, int]]:
    """Lowest, median and highest lesion-load slices among the test subjects."""
    loads = sorted((float(s.label.voxels[z].sum()), s.id, z)
                   for s in subjects if s.id in test_ids for z in range(s.label.dims[0]))
    if not loads:
        raise DataValidationError("no test slices to render")
    pick = {"lowest": loads[0], "median": loads[len(loads) // 2], "highest": loads[-1]}
    return {k: (sid, z) for k, (_, sid, z) in pick.items()}


def write_overlays(cfg: ExperimentConfig, subjects, seed: int, out: Path) -> list[dict]:
    """One PPM per (selected slice, regime) plus a CSV of colour and confusion counts."""
    plans = read_fold_plans(seed_dir(cfg.out, seed) / "folds.csv")
    fold_of = {sid: p.fold for p in plans for sid in p.test}
    by_id = {s.id: s for s in subjects}
    picks = select_slices(subjects, set(fold_of))
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for tag, (sid, z) in picks.items():
        s = by_id[sid]
        for r in cfg.regimes:
            r = Regime(r).value
            pred = read_volume(task_dir(cfg.out, seed, fold_of[sid], r) / "predictions" / f"{sid}_pred.mvol",
                               Modality.LABEL)
            img = metrics.render_overlay(pred.voxels[z], s.label.voxels[z], s.flair.voxels[z])
            metrics.write_ppm(img, out / f"{tag}_{r}.ppm")
            c = metrics.confusion(pred.voxels[z], s.label.voxels[z])
            records.append(dict(slice=tag, regime=r, subject=sid, z=z, **metrics.color_counts(img),
                                conf_tp=c.tp, conf_fp=c.fp, conf_fn=c.fn))
    with open(out / "overlays.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, list(records[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(records)
    return records


def report(results_dir) -> metrics.MetricsReport:
    """Tables and overlay panels from a finished cross-validation directory."""
    results_dir = Path(results_dir)
    if not (results_dir / CONFIG_COPY).exists():
        raise IncompleteResultsError(f"{results_dir} holds no {CONFIG_COPY}; not a cross-validation output")
    cfg = load_config(results_dir / CONFIG_COPY)
    cfg.out = results_dir
    rep = aggregate(cfg)
    write_tables(rep, results_dir)
    subjects = load_cohort(cfg)
    write_overlays(cfg, subjects, cfg.seeds[0], results_dir / "overlays")
    return rep


def lesion_intensity(cfg: ExperimentConfig, subjects, regime) -> float:
    """Mean synthetic intensity inside lesion masks, averaged over test subjects of every seed."""
    by_id = {s.id: s for s in subjects}
    vals = []
    for seed in cfg.seeds:
        for p in read_fold_plans(seed_dir(cfg.out, seed) / "folds.csv"):
            for sid in p.test:
                synth = read_volume(task_dir(cfg.out, seed, p.fold, regime) / "predictions" / f"{sid}_synth.mvol")
                lab = by_id[sid].label.voxels > 0
                if lab.any():
                    vals.append(float(synth.voxels[lab].mean()))
    return float(np.mean(vals))

