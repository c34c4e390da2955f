"""Segmentation and reconstruction scores, significance testing, overlays."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SIGNIFICANCE = 0.005
TP_COLOR = (0, 0, 255)
FP_COLOR = (0, 255, 0)
FN_COLOR = (255, 255, 0)


def _arr(v):
    return np.asarray(getattr(v, "voxels", v), dtype=np.float64)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    for name, a in (("prediction", p), ("truth", t)):
        if not np.all((a == 0) | (a == 1)):
            raise ValueError(f"{name} is not binary")
    p, t = p.astype(bool), t.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        log.info("dice: prediction and truth both empty, scoring 1.0")
        return 1.0
    return 2 * c.tp / denom


def fpr(c: ConfusionCounts) -> float | None:
    """False positives per ground-truth lesion voxel (may exceed 1)."""
    pos = c.tp + c.fn
    if pos == 0:
        log.info("fpr: no ground-truth positives, undefined")
        return None
    return c.fp / pos


def fnr(c: ConfusionCounts) -> float | None:
    pos = c.tp + c.fn
    if pos == 0:
        log.info("fnr: no ground-truth positives, undefined")
        return None
    return c.fn / pos


def _masked(a, b, mask):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    m = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(_arr(mask), dtype=bool)
    if not m.any():
        raise ValueError("empty mask")
    return a[m], b[m]


def mae(a, b, mask=None) -> float:
    a, b = _masked(a, b, mask)
    return float(np.mean(np.abs(a - b)))


def psnr(reference, test, mask=None) -> float:
    """PSNR in dB with the reference's dynamic range over the mask as peak; capped at 99 dB."""
    a, b = _masked(reference, test, mask)
    peak = a.max() - a.min()
    if peak == 0:
        raise ValueError("reference has zero dynamic range inside the mask")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP)


def permutation_test(a, b, n_permutations: int = 10000, seed: int = 0) -> float:
    """Two-sided paired sign-flip test on the mean difference.

    The null distribution depends only on the absolute differences, so those
    are sorted first; the p-value is then invariant to pair order and to
    swapping ``a`` and ``b``. All 2**n sign patterns are enumerated when that
    is no more than ``n_permutations``; otherwise a Monte-Carlo estimate with
    add-one correction is returned.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D of equal length, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    d = np.sort(np.abs(a - b))
    n = d.size
    observed = abs((a - b).mean())
    tol = 1e-12 * max(1.0, d.max())
    if 2 ** n <= n_permutations:
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=n)))
        stats = np.abs(signs @ d) / n
        return float(np.count_nonzero(stats >= observed - tol) / len(stats))
    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, n_permutations, 4096):
        k = min(4096, n_permutations - start)
        signs = rng.choice((-1.0, 1.0), size=(k, n))
        hits += int(np.count_nonzero(np.abs(signs @ d) / n >= observed - tol))
    return (1 + hits) / (1 + n_permutations)


# ---------------------------------------------------------------- overlays


def render_overlay(pred, truth, background) -> np.ndarray:
    """RGB uint8 image: TP blue, FP green, FN yellow over a grey background."""
    p, t, bg = (np.asarray(x, dtype=np.float64) for x in (pred, truth, background))
    if not (p.shape == t.shape == bg.shape) or p.ndim != 2:
        raise ValueError("pred, truth and background must be equal-shaped 2-D slices")
    lo, hi = bg.min(), bg.max()
    grey = np.zeros_like(bg) if hi == lo else (bg - lo) / (hi - lo) * 255.0
    img = np.repeat(np.round(grey).astype(np.uint8)[..., None], 3, axis=2)
    p, t = p > 0.5, t > 0.5
    img[p & t] = TP_COLOR
    img[p & ~t] = FP_COLOR
    img[~p & t] = FN_COLOR
    return img


def color_counts(img: np.ndarray) -> dict[str, int]:
    return {name: int(np.all(img == np.array(c, dtype=np.uint8), axis=-1).sum())
            for name, c in (("tp", TP_COLOR), ("fp", FP_COLOR), ("fn", FN_COLOR))}


def write_ppm(img: np.ndarray, path) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError(f"{path} is not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


# ---------------------------------------------------------------- reports

FIELDS = ("dsc", "fpr", "fnr", "mae", "psnr")


@dataclass
class SubjectRow:
    method: str
    subject: str
    dsc: float
    fpr: float | None
    fnr: float | None
    mae: float | None = None
    psnr: float | None = None


@dataclass
class MetricsReport:
    rows: list[SubjectRow]
    baseline: str = "unimodal"
    means: dict[str, dict[str, float | None]] = field(default_factory=dict)
    pvalues: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def build_report(rows, baseline: str = "unimodal", n_permutations: int = 10000, seed: int = 0) -> MetricsReport:
    """Per-method subject-level means and paired p-values against ``baseline``."""
    rep = MetricsReport(list(rows), baseline)
    by = {}
    for r in rep.rows:
        by.setdefault(r.method, {})[r.subject] = r
    for m in rep.methods():
        rep.means[m] = {f: _mean(getattr(r, f) for r in by[m].values()) for f in FIELDS}
    base = by.get(baseline, {})
    for m in rep.methods():
        rep.pvalues[m] = {}
        for f in ("dsc", "fpr", "fnr"):
            pairs = [(getattr(by[m][s], f), getattr(base[s], f)) for s in by[m] if s in base]
            pairs = [p for p in pairs if None not in p]
            if m == baseline or len(pairs) < 2:
                rep.pvalues[m][f] = None
            else:
                x, y = zip(*pairs)
                rep.pvalues[m][f] = permutation_test(x, y, n_permutations, seed)
    return rep


def _fmt(v):
    return "" if v is None else repr(float(v))


def _parse(v):
    return None if v == "" else float(v)


def write_subject_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "subject") + FIELDS)
        for r in rows:
            w.writerow([r.method, r.subject] + [_fmt(getattr(r, f)) for f in FIELDS])


def read_subject_csv(path) -> list[SubjectRow]:
    with open(path, newline="") as fh:
        return [SubjectRow(d["method"], d["subject"], *(_parse(d[f]) for f in FIELDS))
                for d in csv.DictReader(fh)]


SUMMARY_FIELDS = ("method",) + tuple(f"mean_{f}" for f in FIELDS) + tuple(
    f"p_{f}_vs_baseline" for f in ("dsc", "fpr", "fnr"))


def write_summary_csv(rep: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for m in rep.methods():
            w.writerow([m] + [_fmt(rep.means[m][f]) for f in FIELDS]
                       + [_fmt(rep.pvalues[m][f]) for f in ("dsc", "fpr", "fnr")])


def read_summary_csv(path) -> dict[str, dict[str, float | None]]:
    with open(path, newline="") as fh:
        return {d["method"]: {k: _parse(v) for k, v in d.items() if k != "method"} for d in csv.DictReader(fh)}
